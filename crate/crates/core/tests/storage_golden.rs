use std::path::PathBuf;

use metaeol::storage::{decode, encode, read_embeddings, write_embeddings, EmbeddingRecord, StorageError};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/three_records.meol")
}

fn expected() -> Vec<(&'static str, [u32; 3])> {
    vec![
        ("alpha", [0x3f800000, 0xbf000000, 0x00000000]),
        ("clé|ü", [0x80000000, 0x00000001, 0x7f7fffff]),
        (
            "m|t|-3|ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb",
            [0x7fc00001, 0xff800000, 0x3eaaaaab],
        ),
    ]
}

#[test]
fn reads_golden_written_elsewhere() {
    let file = read_embeddings(&golden_path()).unwrap();
    assert_eq!(file.dim, 3);
    assert_eq!(file.flags, 0);
    let got: Vec<(String, Vec<u32>)> = file
        .records
        .iter()
        .map(|r| (r.key.clone(), r.values.iter().map(|v| v.to_bits()).collect()))
        .collect();
    let want: Vec<(String, Vec<u32>)> = expected()
        .into_iter()
        .map(|(k, b)| (k.to_string(), b.to_vec()))
        .collect();
    assert_eq!(got, want);
}

#[test]
fn encoder_reproduces_golden_bytes() {
    let records: Vec<EmbeddingRecord> = expected()
        .into_iter()
        .map(|(k, b)| EmbeddingRecord::new(k, b.iter().map(|&x| f32::from_bits(x)).collect()))
        .collect();
    let golden = std::fs::read(golden_path()).unwrap();
    assert_eq!(encode(3, 0, &records).unwrap(), golden);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.meol");
    write_embeddings(&path, 3, &records).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), golden);
}

#[test]
fn truncation_and_corruption() {
    let golden = std::fs::read(golden_path()).unwrap();
    assert!(matches!(
        decode(&golden[..30]),
        Err(StorageError::TruncatedFile { offset: 25 })
    ));
    assert!(matches!(
        decode(&golden[..22]),
        Err(StorageError::TruncatedFile { offset: 20 })
    ));
    assert!(matches!(
        decode(&golden[..10]),
        Err(StorageError::TruncatedFile { offset: 10 })
    ));
    let mut bad = golden.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(StorageError::BadMagic)));
    let mut bad = golden.clone();
    bad[4] = 2;
    assert!(matches!(decode(&bad), Err(StorageError::UnsupportedVersion(2))));
    let mut bad = golden.clone();
    bad.push(0);
    assert!(matches!(decode(&bad), Err(StorageError::TrailingBytes { offset: 143 })));
    // rename the second key to match the first
    let mut dup = encode(
        1,
        0,
        &[
            EmbeddingRecord::new("ab", vec![1.0]),
            EmbeddingRecord::new("cd", vec![2.0]),
        ],
    )
    .unwrap();
    let second_key = 18 + 2 + 2 + 4 + 2;
    dup[second_key..second_key + 2].copy_from_slice(b"ab");
    assert!(matches!(decode(&dup), Err(StorageError::DuplicateKey(k)) if k == "ab"));
}

#[test]
fn writer_rejects_bad_records() {
    let r = |k: &str, v: Vec<f32>| EmbeddingRecord::new(k, v);
    assert!(matches!(
        encode(2, 0, &[r("a", vec![1.0, 2.0]), r("a", vec![3.0, 4.0])]),
        Err(StorageError::DuplicateKey(_))
    ));
    assert!(matches!(
        encode(2, 0, &[r("a", vec![1.0])]),
        Err(StorageError::DimMismatch { .. })
    ));
}

#[test]
fn empty_file_roundtrip() {
    let bytes = encode(8, 0, &[]).unwrap();
    assert_eq!(bytes.len(), 18);
    let file = decode(&bytes).unwrap();
    assert_eq!((file.dim, file.records.len()), (8, 0));
}
