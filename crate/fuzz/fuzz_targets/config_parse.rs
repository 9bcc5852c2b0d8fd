#![no_main]

use catpol::config::{parse_entries, parse_train_config, train_config_text, EstlabConfig, RunConfig, SweepConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_entries(text);
    let _ = RunConfig::parse(text);
    let _ = SweepConfig::parse(text);
    let _ = EstlabConfig::parse(text);
    if let Ok(cfg) = parse_train_config(text) {
        let echo = train_config_text(&cfg);
        let back = parse_train_config(&echo).expect("canonical echo parses");
        assert_eq!(train_config_text(&back), echo);
    }
});
