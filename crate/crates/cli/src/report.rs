//! Plain-text tables in two layouts: aligned for reading, tab-separated with
//! one header line for tools.

use clap::ValueEnum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, ValueEnum)]
pub enum ReportFormat {
    #[default]
    Text,
    Columnar,
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// `key: value` lines printed after the table in text form and as
    /// `# key: value` comments in columnar form.
    pub notes: Vec<(String, String)>,
}

impl Table {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.headers.len());
        self.rows.push(cells);
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Text => {
                if !self.title.is_empty() {
                    out.push_str(&format!("== {} ==\n", self.title));
                }
                let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
                for r in &self.rows {
                    for (w, c) in widths.iter_mut().zip(r) {
                        *w = (*w).max(c.chars().count());
                    }
                }
                let line = |cells: &[String]| {
                    let parts: Vec<String> = cells
                        .iter()
                        .zip(&widths)
                        .enumerate()
                        .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                        .collect();
                    parts.join("  ").trim_end().to_string() + "\n"
                };
                if !self.headers.is_empty() {
                    out.push_str(&line(&self.headers));
                    for r in &self.rows {
                        out.push_str(&line(r));
                    }
                }
                for (k, v) in &self.notes {
                    out.push_str(&format!("{k}: {v}\n"));
                }
            }
            ReportFormat::Columnar => {
                if !self.title.is_empty() {
                    out.push_str(&format!("# {}\n", self.title));
                }
                for (k, v) in &self.notes {
                    out.push_str(&format!("# {k}: {v}\n"));
                }
                if !self.headers.is_empty() {
                    out.push_str(&self.headers.join("\t"));
                    out.push('\n');
                    for r in &self.rows {
                        out.push_str(&r.join("\t"));
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

pub fn render_all(tables: &[Table], format: ReportFormat) -> String {
    tables.iter().map(|t| t.render(format)).collect::<Vec<_>>().join("\n")
}

/// `1234567` → `1.23M`.
pub fn human(n: f64) -> String {
    let a = n.abs();
    if a >= 1e9 {
        format!("{:.2}G", n / 1e9)
    } else if a >= 1e6 {
        format!("{:.2}M", n / 1e6)
    } else if a >= 1e3 {
        format!("{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

pub fn dims(d: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3])
}
