//! Parallel execution of independent jobs, with an append-only journal so
//! interrupted sweeps resume without redoing finished cells.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use resexp_core::alignlab::{AlignmentConfig, AlignmentResult, AlignmentSampler};

use crate::error::{CliError, Result};

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start {workers} workers: {e}")))
}

/// Runs every trial chunk of every cell as one job. Counts are summed per
/// cell, so results do not depend on the worker count.
pub fn run_alignment(
    cells: &[AlignmentConfig],
    pool: &rayon::ThreadPool,
) -> Result<Vec<AlignmentResult>> {
    let samplers = cells.iter().map(AlignmentSampler::new).collect::<std::result::Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, u64)> = samplers
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.num_chunks()).map(move |c| (i, c)))
        .collect();
    let counts: Vec<u64> =
        pool.install(|| jobs.par_iter().map(|&(i, c)| samplers[i].chunk_failures(c)).collect());
    let mut per_cell = vec![0u64; samplers.len()];
    for (&(i, _), n) in jobs.iter().zip(counts) {
        per_cell[i] += n;
    }
    Ok(samplers.iter().zip(per_cell).map(|(s, f)| s.finish(f)).collect())
}

#[derive(Serialize, Deserialize)]
struct Header {
    digest: String,
    cells: usize,
}

#[derive(Deserialize)]
struct Entry<T> {
    index: usize,
    rows: Vec<T>,
}

#[derive(Serialize)]
struct EntryRef<'a, T> {
    index: usize,
    rows: &'a [T],
}

/// Completed cells keyed by index, one JSON line each, after a header line
/// naming the run digest.
pub struct Journal<T> {
    path: PathBuf,
    file: Mutex<File>,
    done: BTreeMap<usize, Vec<T>>,
}

impl<T: Serialize + DeserializeOwned> Journal<T> {
    /// Opens `path`, keeping prior entries only if the header matches.
    /// A torn final line is dropped.
    pub fn open(path: &Path, digest: &str, cells: usize) -> Result<Self> {
        let mut done = BTreeMap::new();
        if let Ok(f) = File::open(path) {
            let mut lines = BufReader::new(f).lines();
            let header_ok = match lines.next() {
                Some(Ok(l)) => serde_json::from_str::<Header>(&l)
                    .is_ok_and(|h| h.digest == digest && h.cells == cells),
                _ => false,
            };
            if header_ok {
                for line in lines {
                    let Ok(line) = line else { break };
                    let Ok(e) = serde_json::from_str::<Entry<T>>(&line) else { break };
                    if e.index < cells {
                        done.insert(e.index, e.rows);
                    }
                }
            }
        }
        let mut file = File::create(path)
            .map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        let mut text = serde_json::to_string(&Header { digest: digest.into(), cells })?;
        text.push('\n');
        for (&index, rows) in &done {
            text.push_str(&serde_json::to_string(&EntryRef { index, rows })?);
            text.push('\n');
        }
        file.write_all(text.as_bytes())
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
        Ok(Journal { path: path.to_path_buf(), file: Mutex::new(file), done })
    }

    pub fn completed(&self) -> usize {
        self.done.len()
    }

    fn append(&self, index: usize, rows: &[T]) -> Result<()> {
        let mut line = serde_json::to_string(&EntryRef { index, rows })?;
        line.push('\n');
        let mut f = self.file.lock().expect("journal lock poisoned");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| CliError::io(format!("appending {}", self.path.display()), e))
    }

    /// Runs the missing cells on `pool` and returns all rows in cell order.
    pub fn run<F>(self, cells: usize, pool: &rayon::ThreadPool, job: F) -> Result<Vec<T>>
    where
        T: Send + Sync,
        F: Fn(usize) -> Result<Vec<T>> + Sync,
    {
        let todo: Vec<usize> = (0..cells).filter(|i| !self.done.contains_key(i)).collect();
        let fresh: Vec<(usize, Vec<T>)> = pool.install(|| {
            todo.par_iter()
                .map(|&i| {
                    let rows = job(i)?;
                    self.append(i, &rows)?;
                    Ok((i, rows))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let Journal { path, file, mut done } = self;
        drop(file);
        done.extend(fresh);
        let _ = std::fs::remove_file(&path);
        Ok(done.into_values().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn resumes_from_matching_journal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.jsonl");
        let pool = pool(2).unwrap();
        let calls = AtomicUsize::new(0);
        let job = |i: usize| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(vec![i as f64 * 0.1, 1.0 / (i as f64 + 3.0)])
        };

        // Simulate an interrupted run: two cells recorded, then a torn line.
        let j = Journal::<f64>::open(&p, "abc", 5).unwrap();
        j.append(1, &job(1).unwrap()).unwrap();
        j.append(3, &job(3).unwrap()).unwrap();
        drop(j);
        OpenOptions::new().append(true).open(&p).unwrap().write_all(b"{\"index\":4,\"ro").unwrap();

        calls.store(0, Ordering::SeqCst);
        let j = Journal::<f64>::open(&p, "abc", 5).unwrap();
        assert_eq!(j.completed(), 2);
        let rows = j.run(5, &pool, job).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let expect: Vec<f64> = (0..5).flat_map(|i| job(i).unwrap()).collect();
        assert_eq!(rows, expect);
        assert!(!p.exists());
    }

    #[test]
    fn digest_mismatch_discards_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.jsonl");
        let j = Journal::<u64>::open(&p, "one", 3).unwrap();
        j.append(0, &[7]).unwrap();
        drop(j);
        assert_eq!(Journal::<u64>::open(&p, "two", 3).unwrap().completed(), 0);
    }
}
