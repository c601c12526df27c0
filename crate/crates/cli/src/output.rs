//! Atomic output: write to a temporary file beside the target, then rename.

use std::io::Write;
use std::path::Path;

use anyhow::Context;

/// Runs `write` into a temporary file next to `path` and renames it into
/// place, so readers never see a partial file. Without a path, writes to
/// standard output.
pub fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> anyhow::Result<()> {
    match path {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
        Some(path) => {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)
                .with_context(|| format!("cannot create a temporary file in {}", dir.display()))?;
            {
                let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
                write(&mut buf)?;
                buf.flush()?;
            }
            tmp.as_file().sync_all()?;
            tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
            Ok(())
        }
    }
}

/// Writes a string atomically.
pub fn emit_text(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    emit(path, |w| Ok(w.write_all(text.as_bytes())?))
}
