#![no_main]

use libfuzzer_sys::fuzz_target;

// input is the three files joined by NUL bytes
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut parts = text.splitn(3, '\0');
    let (Some(edges), Some(features), Some(labels)) = (parts.next(), parts.next(), parts.next()) else {
        return;
    };
    if let Ok(g) = csgnn::graph::graph_from_text(edges, features, labels, None) {
        for v in 0..g.num_nodes() {
            assert!(g.neighbors(v).iter().all(|&u| g.neighbors(u).contains(&v)));
        }
    }
});
