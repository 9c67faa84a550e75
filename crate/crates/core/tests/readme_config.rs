use mwp_core::config::RunConfig;

#[test]
fn documented_defaults_match_the_code() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let start = readme.find("```toml\n").expect("toml block") + "```toml\n".len();
    let block = &readme[start..start + readme[start..].find("```").unwrap()];
    assert_eq!(RunConfig::parse(block).unwrap(), RunConfig::default());
}
