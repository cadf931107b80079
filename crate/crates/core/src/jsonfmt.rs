//! JSON emission with floats written at 17 significant digits so every
//! `f64` round-trips exactly through the on-disk artifacts.

use serde::Serialize;
use std::io::{self, Write};

struct SigDigits17;

impl serde_json::ser::Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        // {:.16e} prints one leading digit plus 16 fractional digits.
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{:e}", value)
    }
}

/// Serialize `value` as compact JSON with 17-significant-digit floats.
pub fn to_string_17<T: Serialize>(value: &T) -> crate::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits17);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}
