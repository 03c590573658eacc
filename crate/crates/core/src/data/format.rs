use std::path::Path;

use super::{DataError, DatasetSplit, Normalization, Part, SplitKind};
use crate::container::{self, BodyWriter, FormatError, Metadata};

const MAGIC: &[u8; 8] = b"LTDSET\0\0";
const VERSION: u32 = 1;

fn join_f32(xs: &[f32]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_f32s(s: &str, key: &str) -> Result<Vec<f32>, FormatError> {
    s.split(',')
        .map(|t| t.parse::<f32>())
        .collect::<Result<_, _>>()
        .map_err(|_| FormatError::Malformed(format!("metadata {key}={s:?}")))
}

pub fn encode_dataset(ds: &DatasetSplit) -> Vec<u8> {
    let mut md = Metadata::new();
    md.insert("kind", "dataset");
    md.insert("name", &ds.name);
    md.insert("num_classes", ds.num_classes);
    md.insert(
        "input_shape",
        ds.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
    );
    md.insert("dtype", "f32");
    md.insert("norm_mean", join_f32(&ds.normalization.mean));
    md.insert("norm_std", join_f32(&ds.normalization.std));
    for kind in SplitKind::ALL {
        md.insert(&format!("count_{kind}"), ds.part(kind).len());
    }
    let mut body = BodyWriter::new();
    for kind in SplitKind::ALL {
        let part = ds.part(kind);
        body.put_u64(part.len() as u64);
        body.put_u32s(&part.labels);
        body.put_f32s(&part.images);
    }
    container::encode(MAGIC, VERSION, &md, body)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetSplit, DataError> {
    let (md, mut body) = container::decode(bytes, MAGIC, VERSION)?;
    let name = md.require("name")?.to_string();
    let num_classes: usize = md.parse("num_classes")?;
    let input_shape: Vec<usize> = md
        .require("input_shape")?
        .split('x')
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| FormatError::Malformed("input_shape".into()))?;
    if input_shape.len() != 3 || input_shape.contains(&0) {
        return Err(FormatError::ShapeInconsistency(format!("input shape {input_shape:?}")).into());
    }
    if md.get("dtype") != Some("f32") {
        return Err(FormatError::Malformed(format!("unsupported dtype {:?}", md.get("dtype"))).into());
    }
    let normalization = Normalization {
        mean: parse_f32s(md.require("norm_mean")?, "norm_mean")?,
        std: parse_f32s(md.require("norm_std")?, "norm_std")?,
    };
    let sample_len: usize = input_shape.iter().product();
    let mut parts = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let count = body.get_u64()? as usize;
        if let Some(declared) = md.get(&format!("count_{kind}")) {
            if declared.parse::<usize>().ok() != Some(count) {
                return Err(FormatError::ShapeInconsistency(format!(
                    "{kind} count {count} disagrees with metadata {declared}"
                ))
                .into());
            }
        }
        let labels = body.get_u32s(count)?;
        let images = body.get_f32s(count * sample_len)?;
        parts.push(Part { images, labels });
    }
    body.finish()?;
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let ds = DatasetSplit {
        name,
        num_classes,
        input_shape,
        train,
        validation,
        test,
        normalization,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &DatasetSplit, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_dataset(ds)).map_err(FormatError::from)?;
    Ok(())
}

/// Reads and validates a dataset container. Batches drawn from the result
/// are normalized with the stored training-split statistics.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit, DataError> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{make_synthetic, SynthKind};

    #[test]
    fn round_trip_is_exact() {
        let ds = make_synthetic(SynthKind::TextureProxy, 3, 10, 6, 5).unwrap();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let mut ds = make_synthetic(SynthKind::NaturalProxy, 2, 10, 6, 1).unwrap();
        ds.test.labels[0] = 2;
        let err = decode_dataset(&encode_dataset(&ds)).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }

    #[test]
    fn table_shaped_counts_survive() {
        // 522 / 130 / 639 samples over 8 classes.
        let mut parts = Vec::new();
        let mut counter = 0u32;
        for n in [522usize, 130, 639] {
            let mut p = Part::default();
            for i in 0..n {
                counter += 1;
                p.push(&[counter as f32, 0.5, 0.25, 1.0], (i % 8) as u32);
            }
            parts.push(p);
        }
        let test = parts.pop().unwrap();
        let val = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        let ds = DatasetSplit::new("bone-marrow-shaped", 8, vec![1, 2, 2], train, val, test).unwrap();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!((back.train.len(), back.validation.len(), back.test.len()), (522, 130, 639));
        assert_eq!(back.num_classes, 8);
    }

    #[test]
    fn bad_magic_is_typed() {
        let ds = make_synthetic(SynthKind::NaturalProxy, 2, 10, 4, 1).unwrap();
        let mut bytes = encode_dataset(&ds);
        bytes[1] ^= 0xff;
        assert!(matches!(
            decode_dataset(&bytes),
            Err(DataError::Format(FormatError::BadMagic { .. }))
        ));
    }
}
