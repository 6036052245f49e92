//! File helpers shared by the JSON and CSV writers.
//!
//! Every real number written through [`to_json`] carries 17 significant
//! digits in scientific notation, so a parsed file reproduces the in-memory
//! `f64` bit-for-bit.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Compact JSON formatter that prints floats as `d.dddddddddddddddde±x`.
#[derive(Debug, Default, Clone, Copy)]
pub struct PreciseFloatFormatter;

impl serde_json::ser::Formatter for PreciseFloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", format_real(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Formats a finite real with 17 significant digits.
pub fn format_real(value: f64) -> String {
    format!("{:.16e}", value)
}

/// Serializes `value` to JSON using [`PreciseFloatFormatter`], with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFloatFormatter);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
