//! Plain CSV output. Numbers are written with 17 significant digits so that
//! every value parses back to the same `f64`.

use std::fmt::Write;

pub fn format_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Header line plus one line per row, `\n` terminated.
pub fn csv_table<R>(header: &[String], rows: impl IntoIterator<Item = R>) -> String
where
    R: AsRef<[f64]>,
{
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut first = true;
        for &x in row.as_ref() {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{}", format_number(x));
        }
        out.push('\n');
    }
    out
}
