//! Minimal RFC-4180 writer: CRLF records, quoting only when needed, reals in
//! 17 significant digits so every `f64` round-trips.

use std::io::{self, Write};

pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\r', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub struct CsvWriter<W: Write> {
    out: io::BufWriter<W>,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out: io::BufWriter::new(out),
        }
    }

    pub fn header<S: AsRef<str>>(&mut self, names: &[S]) -> io::Result<()> {
        let fields: Vec<String> = names.iter().map(|s| quote(s.as_ref())).collect();
        write!(self.out, "{}\r\n", fields.join(","))
    }

    pub fn row(&mut self) -> RowBuilder<'_, W> {
        RowBuilder {
            csv: self,
            fields: Vec::new(),
        }
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub struct RowBuilder<'a, W: Write> {
    csv: &'a mut CsvWriter<W>,
    fields: Vec<String>,
}

impl<W: Write> RowBuilder<'_, W> {
    pub fn text(mut self, v: &str) -> Self {
        self.fields.push(quote(v));
        self
    }

    pub fn int(mut self, v: i64) -> Self {
        self.fields.push(v.to_string());
        self
    }

    pub fn real(mut self, v: f64) -> Self {
        self.fields.push(format_real(v));
        self
    }

    pub fn reals(mut self, vs: &[f64]) -> Self {
        self.fields.extend(vs.iter().map(|v| format_real(*v)));
        self
    }

    pub fn opt_real(mut self, v: Option<f64>) -> Self {
        self.fields.push(v.map(format_real).unwrap_or_default());
        self
    }

    pub fn finish(self) -> io::Result<()> {
        write!(self.csv.out, "{}\r\n", self.fields.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(format_real(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn quotes_and_crlf() {
        let mut buf = Vec::new();
        {
            let mut w = CsvWriter::new(&mut buf);
            w.header(&["a", "b,c"]).unwrap();
            w.row().text("say \"hi\"").int(3).finish().unwrap();
            w.flush().unwrap();
        }
        assert_eq!(String::from_utf8(buf).unwrap(), "a,\"b,c\"\r\n\"say \"\"hi\"\"\",3\r\n");
    }
}
