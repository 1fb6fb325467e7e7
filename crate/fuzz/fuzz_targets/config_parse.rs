#![no_main]

use libfuzzer_sys::fuzz_target;
use panosal::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        // Anything that parses must survive its own echo.
        let echo = cfg.echo();
        let back = RunConfig::parse(&echo).expect("echo parses");
        assert_eq!(back.echo(), echo);
        let _ = cfg.validate();
    }
});
