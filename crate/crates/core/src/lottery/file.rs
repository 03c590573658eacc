//! `.ticket` files: framed container holding the weights as raw
//! little-endian f32 records and the mask as packed bitsets.

use std::collections::BTreeMap;
use std::path::Path;

use std::fmt::Write as _;

use super::{LadderRun, TicketBundle, Variant};
use crate::container::{self, BodyReader, BodyWriter, FormatError, Metadata};
use crate::model::{Architecture, ModelSpec};
use crate::param::ParamSnapshot;
use crate::pruning::{Mask, MaskEntry};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LTTICKET";
const VERSION: u32 = 1;
const EXTRA_PREFIX: &str = "meta.";

pub const TICKET_EXTENSION: &str = "ticket";

fn put_shape(body: &mut BodyWriter, shape: &[usize]) {
    body.put_u32(shape.len() as u32);
    for &d in shape {
        body.put_u64(d as u64);
    }
}

fn get_shape(body: &mut BodyReader<'_>) -> Result<Vec<usize>, FormatError> {
    let ndim = body.get_u32()? as usize;
    if ndim > 8 {
        return Err(FormatError::Malformed(format!("{ndim}-dimensional record")));
    }
    (0..ndim).map(|_| body.get_u64().map(|d| d as usize)).collect()
}

fn pack(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |b, (i, &k)| b | ((k as u8) << i)))
        .collect()
}

pub fn encode_ticket(bundle: &TicketBundle) -> Vec<u8> {
    let spec = &bundle.model_spec;
    let mut md = Metadata::new();
    md.insert("kind", "ticket");
    md.insert("variant", bundle.variant);
    md.insert("k", bundle.k);
    md.insert("round", bundle.round);
    md.insert("source_dataset", &bundle.source_dataset);
    md.insert("model", &spec.arch);
    md.insert("input_shape", spec.input_shape_string());
    md.insert("num_classes", spec.num_classes);
    md.insert("init_seed", bundle.init_seed);
    md.insert("created_by", &bundle.created_by);
    md.insert("dtype", "f32");
    md.insert("sparsity", bundle.sparsity());
    for (k, v) in &bundle.metadata {
        md.insert(&format!("{EXTRA_PREFIX}{k}"), v);
    }

    let mut body = BodyWriter::new();
    body.put_u32(bundle.theta.entries.len() as u32);
    for (name, t) in &bundle.theta.entries {
        body.put_str(name);
        put_shape(&mut body, t.shape());
        body.put_f32s(t.data());
    }
    body.put_u32(bundle.mask.entries.len() as u32);
    for e in &bundle.mask.entries {
        body.put_str(&e.name);
        put_shape(&mut body, &e.shape);
        body.put_u64(e.keep.len() as u64);
        body.put_bytes(&pack(&e.keep));
    }
    container::encode(MAGIC, VERSION, &md, body)
}

pub fn decode_ticket(bytes: &[u8]) -> Result<TicketBundle, FormatError> {
    let (md, mut body) = container::decode(bytes, MAGIC, VERSION)?;
    if md.get("dtype") != Some("f32") {
        return Err(FormatError::Malformed(format!("unsupported dtype {:?}", md.get("dtype"))));
    }
    let bad = |key: &str| FormatError::Malformed(format!("metadata {key}"));
    let variant: Variant = md.require("variant")?.parse().map_err(|_| bad("variant"))?;
    let arch: Architecture = md.require("model")?.parse().map_err(|_| bad("model"))?;
    let input_shape: Vec<usize> = md
        .require("input_shape")?
        .split('x')
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("input_shape"))?;
    let model_spec = ModelSpec::new(arch, input_shape, md.parse("num_classes")?)
        .map_err(|e| FormatError::ShapeInconsistency(e.to_string()))?;
    let round: usize = md.parse("round")?;

    let n_params = body.get_u32()? as usize;
    let mut entries = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let name = body.get_str()?;
        let shape = get_shape(&mut body)?;
        let data = body.get_f32s(shape.iter().product())?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::ShapeInconsistency(e.to_string()))?;
        entries.push((name, t));
    }
    let theta = ParamSnapshot { entries };

    let n_masks = body.get_u32()? as usize;
    let mut mask_entries = Vec::with_capacity(n_masks.min(1024));
    for _ in 0..n_masks {
        let name = body.get_str()?;
        let shape = get_shape(&mut body)?;
        let n = body.get_u64()? as usize;
        if n != shape.iter().product::<usize>() {
            return Err(FormatError::ShapeInconsistency(format!(
                "mask {name} has {n} bits for shape {shape:?}"
            )));
        }
        let packed = body.get_bytes(n.div_ceil(8))?;
        let keep: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        if !n.is_multiple_of(8) && packed[n / 8] >> (n % 8) != 0 {
            return Err(FormatError::Malformed(format!("mask {name} has stray padding bits")));
        }
        mask_entries.push(MaskEntry { name, shape, keep });
    }
    body.finish()?;

    let metadata: BTreeMap<String, String> = md
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(EXTRA_PREFIX).map(|k| (k.to_string(), v.to_string())))
        .collect();
    let bundle = TicketBundle {
        mask: Mask {
            entries: mask_entries,
            round,
        },
        theta,
        variant,
        k: md.parse("k")?,
        round,
        source_dataset: md.require("source_dataset")?.to_string(),
        model_spec,
        init_seed: md.parse("init_seed")?,
        created_by: md.require("created_by")?.to_string(),
        metadata,
    };
    bundle
        .validate()
        .map_err(|e| FormatError::ShapeInconsistency(e.to_string()))?;
    Ok(bundle)
}

pub fn save_ticket(bundle: &TicketBundle, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, encode_ticket(bundle))?;
    Ok(())
}

pub fn load_ticket(path: impl AsRef<Path>) -> Result<TicketBundle, FormatError> {
    decode_ticket(&std::fs::read(path)?)
}

/// File name of the ticket for `round` inside a ladder directory.
pub fn ticket_file_name(round: usize, fully_trained: bool) -> String {
    if fully_trained {
        format!("round_{round:02}.fully_trained.ticket")
    } else {
        format!("round_{round:02}.ticket")
    }
}

/// Writes every rung (and its fully-trained counterpart) of `run` into `dir`,
/// plus `ladder.csv` with one line per training run, round 0 first.
pub fn save_ladder(run: &LadderRun, dir: impl AsRef<Path>) -> Result<(), FormatError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for b in &run.ladder.bundles {
        save_ticket(b, dir.join(ticket_file_name(b.round, false)))?;
    }
    for b in &run.fully_trained {
        save_ticket(b, dir.join(ticket_file_name(b.round, true)))?;
    }
    let mut csv = String::from("round,sparsity,test_accuracy,best_val_epoch,stopped_epoch\n");
    for o in std::iter::once(&run.baseline).chain(&run.rounds) {
        writeln!(csv, "{},{},{},{},{}", o.round, o.sparsity, o.test_accuracy, o.best_val_epoch, o.stopped_epoch).unwrap();
    }
    std::fs::write(dir.join("ladder.csv"), csv)?;
    Ok(())
}
