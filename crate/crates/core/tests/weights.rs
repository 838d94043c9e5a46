//! The bundled tiny weight files are exactly what the builder produces.
//! Set `MOSAIC_CODEC_REGEN_FIXTURES=1` to rewrite them.

use std::path::PathBuf;

use mosaic_codec::predictors::graph::{load_graph, store_graph};
use mosaic_codec::NetworkGraph;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn tiny_fixtures_match_builder() {
    for d in [8u8, 14] {
        let path = fixture(&format!("tiny_{d}.mipw"));
        let built = store_graph(&NetworkGraph::tiny_fixture(d).unwrap());
        if std::env::var_os("MOSAIC_CODEC_REGEN_FIXTURES").is_some() {
            std::fs::write(&path, &built).unwrap();
        }
        let on_disk = std::fs::read(&path).unwrap();
        assert_eq!(on_disk, built, "{} is stale", path.display());
        let g = load_graph(&on_disk).unwrap();
        assert_eq!(g.bit_depth(), d);
        assert_eq!(store_graph(&g), on_disk);
    }
}
