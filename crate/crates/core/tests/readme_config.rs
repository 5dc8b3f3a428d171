use polycl_core::experiment::expand_sweep;
use polycl_core::ExperimentConfig;

#[test]
fn readme_config_example_is_valid() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```toml\n").expect("toml block") + "```toml\n".len();
    let len = readme[start..].find("```").unwrap();
    let cfg = ExperimentConfig::from_toml_str(&readme[start..start + len]).unwrap();
    assert_eq!(cfg.repeat, 3);
    assert_eq!(expand_sweep(&cfg).unwrap().len(), 9);
}
