//! Dataset CSV format.
//!
//! ```text
//! # env=point_maze source=medium:seed=0
//! ep,t,s0,..,s{dS-1},a0,..,a{dA-1},r,done,sn0,..,sn{dS-1},src
//! ```
//! Reals are written with 17 significant digits, so a save/load cycle is
//! exact. `done` is `0`/`1`; `src` is the behaviour that produced the row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::dataset::{Behavior, Dataset, Transition, TransitionMeta};
use super::env::{EnvName, EnvSpec};
use crate::{Error, Result};

fn header(spec: &EnvSpec) -> String {
    let mut cols = vec!["ep".to_string(), "t".to_string()];
    cols.extend((0..spec.state_dim).map(|i| format!("s{i}")));
    cols.extend((0..spec.action_dim).map(|i| format!("a{i}")));
    cols.push("r".into());
    cols.push("done".into());
    cols.extend((0..spec.state_dim).map(|i| format!("sn{i}")));
    cols.push("src".into());
    cols.join(",")
}

pub fn write_dataset<W: Write>(d: &Dataset, mut w: W) -> std::io::Result<()> {
    let spec = d.env();
    writeln!(w, "# env={} source={}", spec.name, d.source())?;
    writeln!(w, "{}", header(spec))?;
    let mut line = String::new();
    for (t, m) in d.transitions().iter().zip(d.meta()) {
        line.clear();
        line.push_str(&format!("{},{}", m.episode, m.step));
        for v in t.s.iter().chain(&t.a).chain(std::iter::once(&t.r)) {
            line.push_str(&format!(",{v:.16e}"));
        }
        line.push_str(if t.done { ",1" } else { ",0" });
        for v in &t.s_next {
            line.push_str(&format!(",{v:.16e}"));
        }
        line.push_str(&format!(",{}", m.behavior));
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_dataset(d, BufWriter::new(f)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parse a dataset; `path` is only used in error messages.
pub fn read_dataset<R: BufRead>(r: R, path: &Path) -> Result<Dataset> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((n, Err(e))) => Err(Error::parse(path, n, e.to_string())),
            None => Err(Error::parse(path, 0, format!("missing {what}"))),
        }
    };
    let (n, meta_line) = next("metadata line")?;
    let rest = meta_line
        .strip_prefix("# ")
        .ok_or_else(|| Error::parse(path, n, "expected `# env=... source=...`"))?;
    let mut env = None;
    let mut source = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("env", v)) => env = Some(v.parse::<EnvName>().map_err(|e| Error::parse(path, n, e.to_string()))?),
            Some(("source", v)) => source = Some(v.to_string()),
            _ => return Err(Error::parse(path, n, format!("unexpected metadata `{kv}`"))),
        }
    }
    let env = env.ok_or_else(|| Error::parse(path, n, "metadata lacks env"))?;
    let source = source.ok_or_else(|| Error::parse(path, n, "metadata lacks source"))?;
    let spec = EnvSpec::new(env);

    let (n, head) = next("header")?;
    if head.trim_end() != header(&spec) {
        return Err(Error::parse(path, n, format!("header does not match {env} columns")));
    }
    let (ds, da) = (spec.state_dim, spec.action_dim);
    let arity = 2 + ds + da + 2 + ds + 1;

    let mut transitions = Vec::new();
    let mut meta = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| Error::parse(path, n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != arity {
            return Err(Error::parse(path, n, format!("expected {arity} columns, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(path, n, format!("`{s}`: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(path, n, format!("`{s}`: {e}")));
        let reals = |fs: &[&str]| fs.iter().map(|s| real(s)).collect::<Result<Vec<_>>>();
        let done = match f[3 + ds + da] {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(path, n, format!("done must be 0 or 1, found `{other}`"))),
        };
        let behavior = f[arity - 1].parse::<Behavior>().map_err(|e| Error::parse(path, n, e.to_string()))?;
        transitions.push(Transition {
            s: reals(&f[2..2 + ds])?,
            a: reals(&f[2 + ds..2 + ds + da])?,
            r: real(f[2 + ds + da])?,
            s_next: reals(&f[4 + ds + da..4 + 2 * ds + da])?,
            done,
        });
        meta.push(TransitionMeta {
            episode: int(f[0])?,
            step: int(f[1])?,
            behavior,
        });
    }
    if transitions.is_empty() {
        return Err(Error::parse(path, 0, "dataset has no rows"));
    }
    Dataset::new(spec, source, transitions, meta)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_dataset(BufReader::new(f), path)
}
