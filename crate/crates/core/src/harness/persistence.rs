//! Bundle and population directories.
//!
//! A bundle directory holds `frozen_f.rmk`, `watermarked_f.rmk`,
//! `encoder.rmk`, `decoder.rmk` and a `manifest.txt` of `key=value` lines.
//! A population directory holds `<kind>_<index>.rmk` checkpoints and a
//! `manifest.txt` with one `index,kind,seed,parameters` row per model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::attacks::{PopulationKind, PopulationMember};
use crate::error::{format_err, Result};
use crate::nn::checkpoint;
use crate::scalar::Scalar;
use crate::watermark::{Decoder, EmbedConfig, Encoder, ModelBundle};

pub const BUNDLE_FILES: [&str; 4] = [
    "frozen_f.rmk",
    "watermarked_f.rmk",
    "encoder.rmk",
    "decoder.rmk",
];

pub fn bundle_manifest<T: Scalar>(bundle: &ModelBundle<T>) -> String {
    let h = &bundle.hyper;
    format!(
        "s={}\nk={}\nn={}\nlambda={}\nk_train={}\nepochs={}\nlearning_rate={}\nbatch_size={}\n\
         weight_decay={}\nseed={}\nencoder_scale={}\n",
        bundle.input_dim(),
        bundle.embedding_dim(),
        bundle.message_len(),
        h.lambda,
        h.k_train,
        h.epochs,
        h.learning_rate,
        h.batch_size,
        h.weight_decay,
        h.seed,
        bundle.encoder.scale.to_f64_lossy(),
    )
}

pub fn save_bundle<T: Scalar>(bundle: &ModelBundle<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    checkpoint::save(&bundle.frozen_f, dir.join(BUNDLE_FILES[0]))?;
    checkpoint::save(&bundle.watermarked_f, dir.join(BUNDLE_FILES[1]))?;
    checkpoint::save(&bundle.encoder.net, dir.join(BUNDLE_FILES[2]))?;
    checkpoint::save(&bundle.decoder.net, dir.join(BUNDLE_FILES[3]))?;
    fs::write(dir.join("manifest.txt"), bundle_manifest(bundle))?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            format_err(
                "bundle manifest",
                format!("line {}: expected key=value", i + 1),
            )
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn field<V: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<V> {
    let raw = map
        .get(key)
        .ok_or_else(|| format_err("bundle manifest", format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| format_err("bundle manifest", format!("bad value '{raw}' for {key}")))
}

pub fn load_bundle<T: Scalar>(dir: impl AsRef<Path>) -> Result<ModelBundle<T>> {
    let dir = dir.as_ref();
    let map = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let hyper = EmbedConfig {
        lambda: field(&map, "lambda")?,
        k_train: field(&map, "k_train")?,
        epochs: field(&map, "epochs")?,
        learning_rate: field(&map, "learning_rate")?,
        batch_size: field(&map, "batch_size")?,
        weight_decay: field(&map, "weight_decay")?,
        seed: field(&map, "seed")?,
    };
    let scale: f64 = field(&map, "encoder_scale")?;
    let bundle = ModelBundle::new(
        checkpoint::load(dir.join(BUNDLE_FILES[0]))?,
        checkpoint::load(dir.join(BUNDLE_FILES[1]))?,
        Encoder::new(
            checkpoint::load(dir.join(BUNDLE_FILES[2]))?,
            T::from_f64_lossy(scale),
        )?,
        Decoder::new(checkpoint::load(dir.join(BUNDLE_FILES[3]))?)?,
        hyper,
    )?;
    let dims: [(usize, &str); 3] = [
        (bundle.input_dim(), "s"),
        (bundle.embedding_dim(), "k"),
        (bundle.message_len(), "n"),
    ];
    for (actual, key) in dims {
        let expected: usize = field(&map, key)?;
        if expected != actual {
            return Err(format_err(
                "bundle manifest",
                format!("{key}={expected} but checkpoints give {actual}"),
            ));
        }
    }
    Ok(bundle)
}

fn kind_name(kind: PopulationKind) -> &'static str {
    match kind {
        PopulationKind::Omega => "omega",
        PopulationKind::Xi => "xi",
    }
}

/// Writes every member as a checkpoint and appends rows to `manifest.txt`.
pub fn save_population<T: Scalar>(
    members: &[PopulationMember<T>],
    kind: PopulationKind,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = if manifest_path.exists() {
        fs::read_to_string(&manifest_path)?
    } else {
        String::from("index,population,kind,seed,parameters\n")
    };
    for m in members {
        let name = format!("{}_{:04}.rmk", kind_name(kind), m.index);
        checkpoint::save(&m.backbone, dir.join(&name))?;
        let s = &m.spec;
        let _ = writeln!(
            manifest,
            "{},{},{},{},epochs={};lr={};wd={};fraction={};hidden={};samples={};file={}",
            m.index,
            kind_name(kind),
            s.kind.as_str(),
            s.seed,
            s.epochs,
            s.learning_rate,
            s.weight_decay,
            s.prune_fraction,
            s.hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x"),
            s.samples,
            name
        );
    }
    fs::write(manifest_path, manifest)?;
    Ok(())
}

/// Loads every `*.rmk` in `dir` in file-name order.
pub fn load_checkpoint_dir<T: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<Vec<(String, crate::nn::MlpNetwork<T>)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rmk"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, checkpoint::load(&p)?))
        })
        .collect()
}
