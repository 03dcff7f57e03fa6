// The shipped configs must stay loadable.
use mlsvgd::harness::{ExperimentConfig, RatesConfig};

#[test]
fn shipped_configs_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("rates_") {
            RatesConfig::load(&p).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        seen += 1;
    }
    assert!(seen >= 5);
}
