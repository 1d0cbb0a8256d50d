//! Replays the checked-in fuzz corpus through the parsers with the same
//! assertions the fuzz targets make.

use std::fs;
use std::path::PathBuf;

use csgnn::checkpoint::Checkpoint;
use csgnn::graph::{graph_from_text, parse_edges, parse_features, parse_labels};
use csgnn::TrainConfig;

fn seeds(target: &str) -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<String> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn table_parsers_accept_or_reject_cleanly() {
    for s in seeds("parse_edges") {
        let _ = parse_edges(&s);
    }
    for s in seeds("parse_features") {
        let _ = parse_features(&s);
    }
    for s in seeds("parse_labels") {
        let _ = parse_labels(&s);
    }
}

#[test]
fn graph_seeds_give_symmetric_graphs() {
    let mut built = 0;
    for s in seeds("graph_from_text") {
        let parts: Vec<&str> = s.splitn(3, '\0').collect();
        if let [e, f, l] = parts[..] {
            if let Ok(g) = graph_from_text(e, f, l, None) {
                built += 1;
                for v in 0..g.num_nodes() {
                    assert!(g.neighbors(v).iter().all(|&u| g.neighbors(u).contains(&v)));
                }
            }
        }
    }
    assert!(built > 0);
}

#[test]
fn checkpoint_and_config_seeds_round_trip() {
    let mut ok = 0;
    for s in seeds("checkpoint") {
        if let Ok(c) = Checkpoint::parse(&s) {
            assert_eq!(Checkpoint::parse(&c.to_text()).unwrap(), c);
            ok += 1;
        }
    }
    for s in seeds("config") {
        if let Ok(c) = TrainConfig::parse(&s) {
            assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
            ok += 1;
        }
    }
    assert_eq!(ok, 2);
}
