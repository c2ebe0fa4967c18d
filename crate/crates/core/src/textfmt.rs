//! JSON output with every double written at 17 significant digits
//! (`d.dddddddddddddddde±x`), which round-trips bit-exactly. Non-finite
//! values come out as `null`.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::{Error, Result};

struct Digits17<F>(F);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(w $(, $arg)*)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Digits17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );
}

fn encode<T: Serialize + ?Sized, F: Formatter>(value: &T, fmt: F) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17(fmt));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Single-line encoding.
pub fn to_line<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    encode(value, CompactFormatter)
}

/// Indented multi-line encoding.
pub fn to_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    encode(value, PrettyFormatter::with_indent(b"  "))
}

pub fn write_pretty<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = to_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a document, reporting the path of the first field that fails.
pub fn parse_document<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_eof() || inner.is_syntax() {
            Error::Parse {
                path: path.to_path_buf(),
                line: inner.line(),
                msg: format!("{inner} (while reading `{field}`)"),
            }
        } else {
            Error::Field {
                path: path.to_path_buf(),
                field,
                msg: inner.to_string(),
            }
        }
    })
}

pub fn read_document<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text, path)
}
