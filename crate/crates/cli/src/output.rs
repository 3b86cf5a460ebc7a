//! CSV files in the output directory, plus the `status` file that records
//! whether they are complete.

use anyhow::{Context, Result};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub struct Output {
    dir: PathBuf,
    files: Arc<Mutex<Vec<(String, bool)>>>,
}

pub struct CsvWriter {
    name: String,
    inner: BufWriter<File>,
    files: Arc<Mutex<Vec<(String, bool)>>>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output { dir: dir.to_path_buf(), files: Arc::default() })
    }

    /// Opens `name` and writes the header line.
    pub fn csv(&mut self, name: &str, header: &str) -> Result<CsvWriter> {
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.files.lock().expect("status lock").push((name.to_string(), false));
        let mut w = CsvWriter { name: name.to_string(), inner: BufWriter::new(file), files: Arc::clone(&self.files) };
        w.line(format_args!("{header}"))?;
        Ok(w)
    }

    /// Writes `status`: `complete`, or `partial` with the error and the files
    /// that were cut short.
    pub fn finish(self, error: Option<&anyhow::Error>) -> Result<()> {
        let files = self.files.lock().expect("status lock");
        let mut text = String::new();
        let incomplete: Vec<&str> = files.iter().filter(|(_, done)| !done).map(|(n, _)| n.as_str()).collect();
        match error {
            None if incomplete.is_empty() => text.push_str("status=complete\n"),
            _ => {
                text.push_str("status=partial\n");
                if let Some(e) = error {
                    text.push_str(&format!("error={}\n", format!("{e:#}").replace('\n', " ")));
                }
                text.push_str(&format!("incomplete={}\n", incomplete.join(",")));
            }
        }
        let done: Vec<&str> = files.iter().filter(|(_, d)| *d).map(|(n, _)| n.as_str()).collect();
        text.push_str(&format!("complete={}\n", done.join(",")));
        let path = self.dir.join("status");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

impl CsvWriter {
    fn line(&mut self, args: fmt::Arguments<'_>) -> Result<()> {
        self.inner.write_fmt(args)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn row(&mut self, args: fmt::Arguments<'_>) -> Result<()> {
        self.line(args).with_context(|| format!("writing {}", self.name))?;
        // rows already computed survive a later failure
        self.inner.flush()?;
        Ok(())
    }

    pub fn close(mut self) -> Result<()> {
        self.inner.flush().with_context(|| format!("writing {}", self.name))?;
        if let Some(entry) = self.files.lock().expect("status lock").iter_mut().find(|(n, _)| *n == self.name) {
            entry.1 = true;
        }
        Ok(())
    }
}
