//! On-disk formats: a flat binary layout for layer parameters and a
//! line-delimited text layout for datasets.
//!
//! The parameter file is `AMRA`, a version word, the shape header
//! (`d`, `H`, `S`, then `H` compression rates as numerator/denominator
//! pairs), followed by every weight matrix as row-major little-endian
//! doubles in declaration order — the same order [`AdamraParams::blocks`]
//! walks. Readers are strict: short files, trailing bytes, and shape
//! headers that don't validate are all errors, never best-effort guesses.

use crate::config::Rate;
use crate::error::{Error, Result};
use crate::layer::{AdamraConfig, AdamraParams};
use crate::tasks::Dataset;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"AMRA";
const VERSION: u32 = 1;

/// Writes the layer's shape header and all weights.
pub fn write_params(p: &AdamraParams, cfg: &AdamraConfig, w: &mut dyn Write) -> Result<()> {
    p.validate(cfg)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for dim in [cfg.d as u32, cfg.heads as u32, cfg.subheads as u32] {
        w.write_all(&dim.to_le_bytes())?;
    }
    for rate in &cfg.c {
        w.write_all(&rate.num().to_le_bytes())?;
        w.write_all(&rate.den().to_le_bytes())?;
    }
    for (_, m) in p.blocks() {
        for &v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a parameter file back into a layer and the shape it was saved
/// with. Feature map, stabilizer, routing mode, and gating are runtime
/// settings, not weights; they come back as the config defaults.
pub fn read_params(r: &mut dyn Read) -> Result<(AdamraParams, AdamraConfig)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {}",
            version, VERSION
        )));
    }
    let d = read_u32(r, "d")? as usize;
    let heads = read_u32(r, "H")? as usize;
    let subheads = read_u32(r, "S")? as usize;
    let mut c = Vec::with_capacity(heads);
    for i in 0..heads {
        let num = read_u32(r, "rate numerator")?;
        let den = read_u32(r, "rate denominator")?;
        c.push(Rate::new(num, den).map_err(|e| {
            Error::Format(format!("rate {} of {}: {}", i + 1, heads, e))
        })?);
    }
    let cfg = AdamraConfig::new(d, heads, subheads, c)
        .map_err(|e| Error::Format(format!("shape header: {}", e)))?;

    let mut params = AdamraParams::zeros(&cfg);
    for (name, m) in params.blocks_mut() {
        for v in m.data_mut() {
            let mut buf = [0u8; 8];
            read_exact(r, &mut buf, &name)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok((params, cfg)),
        _ => Err(Error::Format("trailing bytes after final weight".into())),
    }
}

fn read_exact(r: &mut dyn Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("file truncated while reading {}", what)))
}

fn read_u32(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes a dataset as a metadata header line followed by one
/// `token token …<TAB>label` line per example.
pub fn write_dataset(ds: &Dataset, w: &mut dyn Write) -> Result<()> {
    ds.validate()?;
    writeln!(
        w,
        "# vocab={} classes={} split={}",
        ds.vocab_size, ds.num_classes, ds.split
    )?;
    for (seq, label) in ds.sequences.iter().zip(&ds.labels) {
        let toks: Vec<String> = seq.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", toks.join(" "), label)?;
    }
    Ok(())
}

/// Parses [`write_dataset`] output, validating shapes and ranges.
pub fn read_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty dataset file".into(),
    })?;
    let rest = header.strip_prefix("# ").ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("expected '# vocab=… classes=… split=…', got '{}'", header),
    })?;
    let mut vocab_size = None;
    let mut num_classes = None;
    let mut split = None;
    for field in rest.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("malformed header field '{}'", field),
        })?;
        match key {
            "vocab" => {
                vocab_size = Some(value.parse::<usize>().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad vocab '{}'", value),
                })?)
            }
            "classes" => {
                num_classes = Some(value.parse::<usize>().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad classes '{}'", value),
                })?)
            }
            "split" => split = Some(value.to_string()),
            other => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unknown header field '{}'", other),
                })
            }
        }
    }
    let (vocab_size, num_classes, split) = match (vocab_size, num_classes, split) {
        (Some(v), Some(c), Some(s)) => (v, c, s),
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "header must carry vocab, classes, and split".into(),
            })
        }
    };

    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (toks, label) = raw.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected 'tokens<TAB>label'".into(),
        })?;
        let seq = toks
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad token '{}'", t),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let label = label.trim().parse::<usize>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label '{}'", label),
        })?;
        sequences.push(seq);
        labels.push(label);
    }
    let ds = Dataset { sequences, labels, vocab_size, num_classes, split };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::FeatureFn;
    use crate::tasks::gen_copy_task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_layer() -> (AdamraParams, AdamraConfig) {
        let cfg = AdamraConfig::new(
            8,
            2,
            2,
            vec![Rate::ONE, Rate::new(1, 3).unwrap()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (AdamraParams::init(&cfg, &mut rng).unwrap(), cfg)
    }

    #[test]
    fn params_roundtrip_is_bitwise_exact() {
        let (params, cfg) = sample_layer();
        let mut buf = Vec::new();
        write_params(&params, &cfg, &mut buf).unwrap();
        let (back, back_cfg) = read_params(&mut buf.as_slice()).unwrap();

        assert_eq!(back_cfg.d, cfg.d);
        assert_eq!(back_cfg.heads, cfg.heads);
        assert_eq!(back_cfg.subheads, cfg.subheads);
        assert_eq!(back_cfg.c, cfg.c);
        for ((na, a), (nb, b)) in params.blocks().iter().zip(back.blocks().iter()) {
            assert_eq!(na, nb);
            // bitwise, not approximate: doubles written and read verbatim
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "block {} changed across the roundtrip", na);
        }
    }

    #[test]
    fn runtime_settings_come_back_as_defaults() {
        let (params, mut cfg) = sample_layer();
        cfg.phi = FeatureFn::EluPlusOne;
        cfg.eps = 0.5;
        let mut buf = Vec::new();
        write_params(&params, &cfg, &mut buf).unwrap();
        let (_, back_cfg) = read_params(&mut buf.as_slice()).unwrap();
        // only shape survives; phi/eps are not weights
        assert_eq!(back_cfg.phi, AdamraConfig::new(8, 1, 1, vec![Rate::ONE]).unwrap().phi);
    }

    #[test]
    fn reader_rejects_corruption() {
        let (params, cfg) = sample_layer();
        let mut buf = Vec::new();
        write_params(&params, &cfg, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_params(&mut bad_magic.as_slice()), Err(Error::Format(_))));

        let mut bad_version = buf.clone();
        bad_version[4] = 99;
        assert!(matches!(read_params(&mut bad_version.as_slice()), Err(Error::Format(_))));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_params(&mut &truncated[..]), Err(Error::Format(_))));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_params(&mut trailing.as_slice()), Err(Error::Format(_))));

        // zero denominator in the rate header
        let mut bad_rate = buf.clone();
        let rate_offset = 4 + 4 + 12 + 4; // magic, version, dims, first numerator
        bad_rate[rate_offset..rate_offset + 4].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_params(&mut bad_rate.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_roundtrips_through_text() {
        let ds = gen_copy_task(3, 8, 5, 40).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# vocab=5 classes=2 split=all\n"));
        let back = read_dataset(&text).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_reader_reports_line_numbers() {
        let text = "# vocab=4 classes=2 split=t\n1 2 3 0\t1\n1 2 x 0\t0\n";
        match read_dataset(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("'x'"), "message was '{}'", msg);
            }
            other => panic!("expected parse error, got {:?}", other),
        }

        assert!(read_dataset("").is_err());
        assert!(read_dataset("no header\n").is_err());
        assert!(read_dataset("# vocab=4 classes=2\n").is_err()); // missing split
        // token outside declared vocab caught by validation
        let oob = "# vocab=4 classes=2 split=t\n1 9 3 0\t1\n";
        assert!(read_dataset(oob).is_err());
    }
}
