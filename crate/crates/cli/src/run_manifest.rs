//! `run.toml`, written beside every command's outputs.

use std::path::Path;

use anyhow::Context;
use bandfuse_core::{checkpoint, dataset, Config};
use serde::Serialize;

#[derive(Debug, Serialize)]
struct Versions {
    bandfuse: &'static str,
    checkpoint_format: u16,
    manifest_format: u32,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    versions: Versions,
    config: &'a Config,
}

pub fn write(out: &Path, command: &str, seed: u64, cfg: &Config) -> anyhow::Result<()> {
    let m = RunManifest {
        command,
        argv: std::env::args().collect(),
        seed,
        versions: Versions {
            bandfuse: env!("CARGO_PKG_VERSION"),
            checkpoint_format: checkpoint::VERSION,
            manifest_format: dataset::MANIFEST_VERSION,
        },
        config: cfg,
    };
    let path = out.join("run.toml");
    let text = toml::to_string(&m).context("serializing run manifest")?;
    std::fs::write(&path, text).map_err(|e| bandfuse_core::Error::Io { path, source: e })?;
    Ok(())
}
