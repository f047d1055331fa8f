use std::process::Command;

use pfxd::data::{decode_features, encode_features, read_features, FeatureRecord};
use pfxd::Error;

/// Writes a PFXFEAT1 file the way an external producer would, field by
/// field with explicit little-endian packing.
const PY_WRITER: &str = r#"
import math, struct, sys
records = [
    ("img-000", [3.0, 4.0, 0.0], ["a red circle", "the circle is red"]),
    ("img-001", [1.0, 1.0, 1.0], ["three ones"]),
    ("img-dup", [3.0, 4.0, 0.0], ["same image again"]),
]
out = bytearray(b"PFXFEAT1")
out += struct.pack("<II", len(records), 3)
for rid, feat, caps in records:
    n = math.sqrt(sum(v * v for v in feat))
    b = rid.encode()
    out += struct.pack("<H", len(b)) + b
    out += struct.pack("<3f", *[v / n for v in feat])
    out += struct.pack("<B", len(caps))
    for c in caps:
        cb = c.encode()
        out += struct.pack("<H", len(cb)) + cb
open(sys.argv[1], "wb").write(out)
"#;

#[test]
fn externally_written_file_validates_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ext.bin");
    let status = match Command::new("python3")
        .arg("-c")
        .arg(PY_WRITER)
        .arg(&path)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("python3 not available; skipping");
            return;
        }
    };
    assert!(status.success());
    let recs = read_features(&path).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0].id, "img-000");
    assert!((recs[0].feat[0] - 0.6).abs() < 1e-7);
    assert!((recs[0].feat[1] - 0.8).abs() < 1e-7);
    assert_eq!(recs[0].captions, ["a red circle", "the circle is red"]);
    for r in &recs {
        r.validate().unwrap();
    }
    let cos = pfxd::select::cosine_similarity(&recs[0].feat, &recs[2].feat).unwrap();
    assert!((cos - 1.0).abs() < 1e-6);
    // our writer produces the same bytes
    assert_eq!(
        encode_features(&recs).unwrap(),
        std::fs::read(&path).unwrap()
    );
}

fn sample_records() -> Vec<FeatureRecord> {
    vec![
        FeatureRecord {
            id: "a".into(),
            feat: vec![1.0, 0.0],
            captions: vec!["x".into()],
        },
        FeatureRecord {
            id: "b".into(),
            feat: vec![0.0, -1.0],
            captions: vec!["y".into(), "z z".into()],
        },
    ]
}

#[test]
fn every_truncation_is_reported_with_offset() {
    let bytes = encode_features(&sample_records()).unwrap();
    for cut in 0..bytes.len() {
        match decode_features(&bytes[..cut]) {
            Err(Error::TruncatedFile { offset }) => assert_eq!(offset, cut),
            Err(Error::BadMagic { .. }) if cut < 8 => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn corrupted_headers_and_bodies() {
    let bytes = encode_features(&sample_records()).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        decode_features(&magic),
        Err(Error::BadMagic { .. })
    ));
    let mut version = bytes.clone();
    version[7] = b'2';
    assert!(matches!(decode_features(&version), Err(Error::BadVersion)));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_features(&trailing).is_err());

    let mut unnormalized = sample_records();
    unnormalized[1].feat = vec![0.5, 0.5];
    let bytes = encode_features(&unnormalized).unwrap();
    let err = decode_features(&bytes).unwrap_err();
    assert!(err.to_string().contains("record b"), "{err}");
}
