//! Output-directory plumbing: the run lock, the timing report and small
//! readers for wide and long-format CSV inputs.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use timeflow_core::datapipe::{read_csv_rows, window_count};
use timeflow_core::samplers::read_long_csv;
use timeflow_core::{Error, Tensor};

use crate::error::{CliError, CliResult};

pub const TIMING_HEADER: &str = "stage,seconds,n_steps,windows";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Appends one `(stage, seconds)` row, writing the header for a new file.
pub fn append_timing(path: &Path, stage: &str, seconds: f64, n_steps: usize, windows: usize) -> CliResult<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(TIMING_HEADER);
        text.push('\n');
    }
    text.push_str(&format!("{stage},{seconds:.6},{n_steps},{windows}\n"));
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Whether `path` is a long-format sample file (by its header).
pub fn is_long_csv(path: &Path) -> CliResult<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    Ok(header.trim() == "sample_id,t_index,feature,value")
}

pub fn read_long(path: &Path) -> CliResult<Tensor> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_long_csv(f)?)
}

/// Raw (unscaled) sliding windows `[B, length, D]` over a headered wide CSV.
/// With `features = Some(d)` a column-count mismatch or a file shorter than
/// one window is a dimension error naming the expected `[length, d]`.
pub fn read_windows(path: &Path, length: usize, stride: usize, features: Option<usize>) -> CliResult<Tensor> {
    let (header, values) = read_csv_rows(path)?;
    let d = header.len();
    let rows = if d == 0 { 0 } else { values.len() / d };
    let expected = [length, features.unwrap_or(d)];
    if d == 0 || Some(d) != features.or(Some(d)) || rows < length {
        return Err(Error::Dimension {
            op: "reference CSV vs expected [L, D_f]",
            lhs: vec![rows, d],
            rhs: expected.to_vec(),
        }
        .into());
    }
    let n = window_count(rows, length, stride.max(1));
    let mut data = Vec::with_capacity(n * length * d);
    for w in 0..n {
        let start = w * stride.max(1);
        data.extend_from_slice(&values[start * d..(start + length) * d]);
    }
    Ok(Tensor::new(&[n, length, d], data)?)
}
