//! Report writing: stdout, or atomic write to a file (temp then rename) so
//! a failed run never leaves a partial output behind.

use std::io::Write;
use std::path::Path;

use bitstash_core::Result;

pub fn write_report(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        None => {
            print!("{text}");
            std::io::stdout().flush()?;
        }
        Some(path) => {
            let tmp = path.with_extension(format!(
                "{}.tmp",
                path.extension().and_then(|e| e.to_str()).unwrap_or("out")
            ));
            std::fs::write(&tmp, text)?;
            std::fs::rename(&tmp, path)?;
        }
    }
    Ok(())
}
