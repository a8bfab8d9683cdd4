//! The files under `configs/` are the serialized code presets. Regenerate
//! them with `TESSERA_WRITE_PRESETS=1 cargo test --test presets`.

use std::path::{Path, PathBuf};

use serde_json::Value;
use tessera::data::ClassConfig;
use tessera::invert::InvertSpec;
use tessera::material::MaterialClass;
use tessera::train::TrainSpec;

const NAMED: [(&str, MaterialClass); 4] =
    [("tile", MaterialClass::Tile), ("leather", MaterialClass::Leather), ("stone", MaterialClass::Stone), ("metal", MaterialClass::Metal)];

fn presets() -> Vec<(PathBuf, Value)> {
    let mut out = Vec::new();
    for (name, c) in NAMED {
        out.push((format!("class/{name}.json").into(), v(&ClassConfig::preset(c))));
        out.push((format!("train/{name}_64.json").into(), v(&TrainSpec::desk(c, 64))));
    }
    for res in [32, 64] {
        let mut s = TrainSpec::desk(MaterialClass::Tile, res);
        // 20k images
        s.total_steps = (20_000 / s.batch_size) as u64;
        out.push((format!("train/tile_{res}_smoke.json").into(), v(&s)));
    }
    for (name, c) in &NAMED[..2] {
        out.push((format!("train/{name}_512_full.json").into(), v(&TrainSpec::full(*c))));
    }
    out.push(("invert/default.json".into(), v(&InvertSpec::default())));
    out
}

fn v<T: serde::Serialize>(x: &T) -> Value {
    serde_json::to_value(x).unwrap()
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn preset_files_match_code() {
    let write = std::env::var_os("TESSERA_WRITE_PRESETS").is_some();
    for (rel, value) in presets() {
        let path = root().join(&rel);
        if write {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap() + "\n").unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let on_disk: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(on_disk, value, "{} is stale", rel.display());
    }
}

#[test]
fn preset_files_validate() {
    for (name, _) in NAMED {
        let s: TrainSpec = tessera::config::load(&root().join(format!("train/{name}_64.json"))).unwrap();
        s.validate().unwrap();
        let c: ClassConfig = tessera::config::load(&root().join(format!("class/{name}.json"))).unwrap();
        c.validate(64).unwrap();
    }
    for f in ["tile_32_smoke", "tile_64_smoke", "tile_512_full", "leather_512_full"] {
        let s: TrainSpec = tessera::config::load(&root().join(format!("train/{f}.json"))).unwrap();
        s.validate().unwrap();
    }
    let inv: InvertSpec = tessera::config::load(&root().join("invert/default.json")).unwrap();
    inv.validate().unwrap();
}

#[test]
fn full_presets_keep_the_published_constants() {
    for (name, _) in &NAMED[..2] {
        let s: TrainSpec = tessera::config::load(&root().join(format!("train/{name}_512_full.json"))).unwrap();
        assert_eq!(s.generator.out_resolution, 512);
        assert_eq!(s.generator.base_resolution(), 32);
    }
    let inv: InvertSpec = tessera::config::load(&root().join("invert/default.json")).unwrap();
    assert_eq!(inv.l1_resolution, 16);
    assert_eq!(inv.translation_cadence, 2);
}
