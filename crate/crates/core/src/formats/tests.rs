use super::*;
use crate::bcm::{make_task, Family, GeneratorConfig, MechanismKind};

fn sample_bundles() -> Vec<crate::bcm::TaskBundle> {
    let mut out = vec![];
    for (k, family) in [
        Family::default(),
        Family::three_node_linear(),
        Family::three_node(MechanismKind::GpDraw),
    ]
    .into_iter()
    .enumerate()
    {
        let config = GeneratorConfig {
            family,
            n_obs_min: 20,
            n_obs_max: 40,
            n_total: None,
            n_int: 7,
            m_int: k,
            ..GeneratorConfig::default()
        };
        out.push(make_task(&config, 100 + k as u64).unwrap());
    }
    out
}

#[test]
fn bundle_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (k, bundle) in sample_bundles().into_iter().enumerate() {
        let path = dir.path().join(format!("task_{k}.macd"));
        write_bundle(&path, &bundle, Some("abc")).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (back, digest) = read_bundle(&path).unwrap();
        assert_eq!(digest.as_deref(), Some("abc"));
        assert_eq!(back, bundle);
        write_bundle(&path, &back, Some("abc")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

#[test]
fn corrupt_bundles_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = &sample_bundles()[0];
    let bytes = bundle_bytes(bundle, None).unwrap();
    let path = dir.path().join("x.macd");

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(read_bundle(&path), Err(crate::Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(read_bundle(&path), Err(crate::Error::Format(_))));

    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(read_bundle(&path), Err(crate::Error::Format(_))));
}

#[test]
fn atomic_write_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    atomic_write(&path, b"one").unwrap();
    atomic_write(&path, b"two").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"two");
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
    assert!(atomic_write(&dir.path().join("missing/a.bin"), b"x").is_err());
}

fn three_column_csv(rows: usize) -> String {
    let mut s = String::from("a,b,c\n");
    for r in 0..rows {
        let r = r as f64;
        s.push_str(&format!("{},{},{}\n", 0.3 * r - 1.1, (r * 0.7).sin() * 2.5, r * r / 7.0 + 0.125));
    }
    s
}

#[test]
fn import_builds_a_standardized_bundle() {
    let table = parse_numeric_csv(three_column_csv(10).as_bytes()).unwrap();
    let spec = TableImport {
        obs_rows: 10,
        int_node: "0".into(),
        outcome: "c".into(),
        int_values_column: None,
    };
    let b = import_table(&table, &spec).unwrap();
    assert_eq!((b.num_nodes(), b.n_obs(), b.n_int()), (3, 10, 0));
    assert_eq!((b.int_node, b.outcome_node), (0, 2));
    let meta = b.metadata.as_ref().unwrap();
    assert!(meta.external && meta.scm.is_none());
    assert!(b.standardizer.is_some());
}

#[test]
fn import_then_export_reproduces_the_table() {
    let table = parse_numeric_csv(three_column_csv(14).as_bytes()).unwrap();
    let spec = TableImport {
        obs_rows: 9,
        int_node: "b".into(),
        outcome: "a".into(),
        int_values_column: None,
    };
    let b = import_table(&table, &spec).unwrap();
    assert_eq!(b.n_int(), 5);
    let back = export_table(&b).unwrap();
    assert_eq!(back.columns, table.columns);
    for (x, y) in back.rows.iter().flatten().zip(table.rows.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn import_reports_bad_cells_and_columns() {
    let err = parse_numeric_csv("a,b\n1,2\n3,x\n".as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("`b`"), "{err}");
    let err = parse_numeric_csv("a,b\n1,2\n3\n".as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    let table = parse_numeric_csv(three_column_csv(5).as_bytes()).unwrap();
    let spec = TableImport {
        obs_rows: 5,
        int_node: "a".into(),
        outcome: "missing".into(),
        int_values_column: None,
    };
    let err = import_table(&table, &spec).unwrap_err().to_string();
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn auxiliary_column_supplies_intervention_values() {
    let table = parse_numeric_csv("x,y,dose\n1,2,0\n2,1,0\n3,5,0\n9,9,0.5\n9,9,-1.5\n".as_bytes()).unwrap();
    let spec = TableImport {
        obs_rows: 3,
        int_node: "x".into(),
        outcome: "y".into(),
        int_values_column: Some("dose".into()),
    };
    let b = import_table(&table, &spec).unwrap();
    assert_eq!(b.num_nodes(), 2);
    let st = b.standardizer.as_ref().unwrap();
    let raw: Vec<f64> = b.int_values.iter().map(|&z| st.inverse_value(0, z)).collect();
    assert!((raw[0] - 0.5).abs() < 1e-12 && (raw[1] + 1.5).abs() < 1e-12);
}
