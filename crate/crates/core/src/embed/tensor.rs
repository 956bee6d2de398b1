use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{check_vectors, EmbedError, EmbeddingCache, EmbeddingProvider};
use crate::dataset::DatasetTable;
use crate::serializer::{serialize_dataset, Template};

const MAGIC: &[u8; 4] = b"TTET";

/// `N x M x d` per-cell embeddings, row-major, with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTensor {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub model_id: String,
    pub dataset: String,
    pub template: String,
    data: Vec<f32>,
}

impl EmbeddedTensor {
    pub fn new(
        (n, m, d): (usize, usize, usize),
        data: Vec<f32>,
        model_id: &str,
        dataset: &str,
        template: &str,
    ) -> Result<Self, EmbedError> {
        if data.len() != n * m * d {
            return Err(EmbedError::BadResponse(format!(
                "tensor data has {} values, shape ({n}, {m}, {d}) needs {}",
                data.len(),
                n * m * d
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::BadResponse("embedded tensor contains non-finite values".into()));
        }
        Ok(Self {
            n,
            m,
            d,
            model_id: model_id.to_string(),
            dataset: dataset.to_string(),
            template: template.to_string(),
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.d)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.m + col) * self.d;
        &self.data[start..start + self.d]
    }

    /// Rows `rows` as a flat `[rows.len(), M, d]` buffer.
    pub fn gather_rows(&self, rows: &[usize]) -> Vec<f32> {
        let stride = self.m * self.d;
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        out
    }

    /// SHA-256 over the shape and raw float bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.n, self.m, self.d] {
            h.update((v as u64).to_le_bytes());
        }
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.n, self.m, self.d] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in [&self.model_id, &self.dataset, &self.template] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbedError> {
        let bad = |what: &str| EmbedError::BadResponse(format!("embedded tensor file: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut dims = [0usize; 3];
        for v in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *v = usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("dimension overflow"))?;
        }
        let mut strings = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            let len = u32::from_le_bytes(b) as usize;
            let mut s = vec![0u8; len];
            r.read_exact(&mut s).map_err(|_| bad("truncated header"))?;
            strings.push(String::from_utf8(s).map_err(|_| bad("header text is not UTF-8"))?);
        }
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|x| x.checked_mul(dims[2]))
            .ok_or_else(|| bad("shape overflow"))?;
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != 4 * count {
            return Err(bad(&format!("expected {} data bytes, found {}", 4 * count, buf.len())));
        }
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new((dims[0], dims[1], dims[2]), data, &strings[0], &strings[1], &strings[2])
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let tmp = path.with_extension("tmp");
        self.write_to(std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_in_flight: 4,
        }
    }
}

/// Embed every cell of `table`. Distinct sentences are embedded once; the
/// cache is consulted first and filled with whatever the provider returns.
pub fn build_embedded_tensor(
    table: &DatasetTable,
    provider: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
    template: &Template,
    options: EmbedOptions,
) -> Result<EmbeddedTensor, EmbedError> {
    let d = provider.dimension();
    if let Some(c) = cache {
        if c.dimension() != d || c.model_id() != provider.model_id() {
            return Err(EmbedError::Cache(format!(
                "cache is for `{}` (d={}), provider is `{}` (d={d})",
                c.model_id(),
                c.dimension(),
                provider.model_id()
            )));
        }
    }
    let sd = serialize_dataset(table, template);
    let mut vectors: Vec<Option<Vec<f32>>> = vec![None; sd.unique.len()];
    let mut misses = Vec::new();
    for (u, sentence) in sd.unique.iter().enumerate() {
        match cache.map(|c| c.get(sentence)).transpose()?.flatten() {
            Some(v) => vectors[u] = Some(v),
            None => misses.push(u),
        }
    }
    log::info!(
        "{}: {} cells, {} distinct sentences, {} cache misses",
        table.name,
        sd.grid.len(),
        sd.unique.len(),
        misses.len()
    );

    let batches: Vec<&[usize]> = misses.chunks(options.batch_size.max(1)).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Vec<Vec<f32>>>>> = Mutex::new(vec![None; batches.len()]);
    let failure: Mutex<Option<(usize, EmbedError)>> = Mutex::new(None);
    let workers = options.max_in_flight.clamp(1, batches.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::SeqCst);
                if b >= batches.len() || failure.lock().expect("poisoned").is_some() {
                    break;
                }
                let sentences: Vec<String> = batches[b].iter().map(|&u| sd.unique[u].clone()).collect();
                let outcome = provider
                    .embed_batch(&sentences)
                    .and_then(|v| check_vectors(provider, sentences.len(), &v).map(|_| v))
                    .and_then(|v| {
                        if let Some(c) = cache {
                            for (s, x) in sentences.iter().zip(&v) {
                                c.put(s, x)?;
                            }
                        }
                        Ok(v)
                    });
                match outcome {
                    Ok(v) => results.lock().expect("poisoned")[b] = Some(v),
                    Err(e) => {
                        let e = match e {
                            EmbedError::Transport { attempts, message, .. } => EmbedError::Transport {
                                batch: b,
                                attempts,
                                message,
                            },
                            other => other,
                        };
                        let mut f = failure.lock().expect("poisoned");
                        if f.as_ref().is_none_or(|(fb, _)| b < *fb) {
                            *f = Some((b, e));
                        }
                        break;
                    }
                }
            });
        }
    });
    if let Some(c) = cache {
        c.flush()?;
    }
    if let Some((b, e)) = failure.into_inner().expect("poisoned") {
        let first = batches[b][0];
        let cell = sd.grid.iter().position(|&u| u == first).unwrap_or(0);
        return Err(EmbedError::AtCell {
            row: cell / sd.n_cols,
            col: cell % sd.n_cols,
            source: Box::new(e),
        });
    }
    for (batch, result) in batches.iter().zip(results.into_inner().expect("poisoned")) {
        let result = result.expect("every batch finished");
        for (&u, v) in batch.iter().zip(result) {
            vectors[u] = Some(v);
        }
    }

    let mut data = Vec::with_capacity(sd.grid.len() * d);
    for &u in &sd.grid {
        data.extend_from_slice(vectors[u].as_deref().expect("all sentences embedded"));
    }
    EmbeddedTensor::new(
        (sd.n_rows, sd.n_cols, d),
        data,
        provider.model_id(),
        &table.name,
        template.as_str(),
    )
}
