use crate::error::{Error, Result};
use crate::harness::synth::Sample;
use crate::metrics::{LabelMask, MetricsReport};
use crate::tensor::Tensor;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

/// Write an 8-bit binary graymap (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::invalid("pgm data length does not match its size"));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    f.flush()?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated pgm header".into()));
    }
    Ok(tok)
}

/// Read an 8-bit binary graymap, returning `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if header_token(&mut r)? != "P5" {
        return Err(Error::Format(format!("{} is not a binary graymap", path.display())));
    }
    let num = |r: &mut BufReader<std::fs::File>| -> Result<usize> {
        header_token(r)?
            .parse()
            .map_err(|_| Error::Format("bad pgm header number".into()))
    };
    let (w, h, maxval) = (num(&mut r)?, num(&mut r)?, num(&mut r)?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported pgm maxval {maxval}")));
    }
    let mut data = vec![0u8; w * h];
    r.read_exact(&mut data)?;
    Ok((w, h, data))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("img_{index:06}.pgm"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("msk_{index:06}.pgm"))
}

/// Store one sample: the image as its channels stacked vertically, the mask
/// with raw class indices.
pub fn write_sample(dir: &Path, index: usize, sample: &Sample) -> Result<()> {
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let pixels: Vec<u8> = sample.image.data().iter().map(|&v| quantize(v)).collect();
    write_pgm(&image_path(dir, index), w, c * h, &pixels)?;
    write_pgm(&mask_path(dir, index), w, h, sample.mask.labels())
}

/// Load one stored sample (intensities come back quantized to 1/255).
pub fn read_sample(dir: &Path, index: usize) -> Result<Sample> {
    let (w, h3, img) = read_pgm(&image_path(dir, index))?;
    let (mw, mh, labels) = read_pgm(&mask_path(dir, index))?;
    if mw != w || h3 != 3 * mh {
        return Err(Error::Format(format!("sample {index}: image and mask sizes disagree")));
    }
    let image = Tensor::new(&[3, mh, mw], img.iter().map(|&v| v as f32 / 255.0).collect())?;
    Ok(Sample {
        image,
        mask: LabelMask::new(mw, mh, labels)?,
    })
}

/// Load every `img_*/msk_*` pair in `dir`, in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    while image_path(dir, out.len()).exists() {
        out.push(read_sample(dir, out.len())?);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no samples found in {}", dir.display())));
    }
    Ok(out)
}

/// Per-class probability maps (`prob_<case>_c<k>.pgm`, scaled to 0–255) and
/// the predicted mask (`pred_<case>.pgm`, class indices).
pub fn write_prediction(dir: &Path, case: usize, probs: &[f32], classes: usize, mask: &LabelMask) -> Result<()> {
    let (w, h) = (mask.width(), mask.height());
    if probs.len() != classes * w * h {
        return Err(Error::invalid("probability map size mismatch"));
    }
    for k in 0..classes {
        let plane: Vec<u8> = probs[k * w * h..(k + 1) * w * h].iter().map(|&v| quantize(v)).collect();
        write_pgm(&dir.join(format!("prob_{case:06}_c{k}.pgm")), w, h, &plane)?;
    }
    write_pgm(&dir.join(format!("pred_{case:06}.pgm")), w, h, mask.labels())
}

pub const METRICS_HEADER: &str = "step,class,dsc,hd95,loss,seed,config_hash";

/// Rows of the metrics CSV for one snapshot: one per foreground class and a
/// final `mean` row. Undefined HD95 values are left empty.
pub fn metrics_rows(step: usize, report: &MetricsReport, loss: f64, seed: u64, hash: &str) -> Vec<String> {
    let fmt_hd = |h: Option<f64>| h.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut rows: Vec<String> = report
        .per_class_dsc
        .iter()
        .zip(&report.per_class_hd95)
        .enumerate()
        .map(|(i, (d, h))| format!("{step},{},{d:.6},{},{loss:.8},{seed},{hash}", i + 1, fmt_hd(*h)))
        .collect();
    rows.push(format!(
        "{step},mean,{:.6},{},{loss:.8},{seed},{hash}",
        report.mean_dsc,
        fmt_hd(report.mean_hd95)
    ));
    rows
}
