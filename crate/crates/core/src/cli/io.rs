use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// `v` with six significant digits, trailing zeros kept (`0.250000`).
fn six_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0.00000".into() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..6).contains(&exp) {
        format!("{v:.*}", (5 - exp) as usize)
    } else {
        sci
    }
}

/// `step,loss` CSV body; steps count from 1.
pub fn loss_csv(losses: &[f64]) -> Result<String> {
    if losses.is_empty() {
        return Err(Error::invalid("loss series is empty"));
    }
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, six_significant(*l)));
    }
    Ok(out)
}

pub fn export_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    write_atomic(path, loss_csv(losses)?.as_bytes())
}
