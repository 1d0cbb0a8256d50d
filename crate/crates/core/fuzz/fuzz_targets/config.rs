#![no_main]

use csgnn::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        let again = TrainConfig::parse(&cfg.to_text()).expect("written configs parse");
        assert_eq!(cfg.to_text(), again.to_text());
    }
});
