//! Append-only embedding cache, one file per model id.
//!
//! Layout: `"TTE1"`, u32 model-id length, model-id bytes, u32 dimension, then
//! records of `[sha256(sentence); 32][d x f32]`, all little-endian.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::EmbedError;

const MAGIC: &[u8; 4] = b"TTE1";
const HASH_LEN: usize = 32;

pub fn sentence_hash(sentence: &str) -> [u8; HASH_LEN] {
    Sha256::digest(sentence.as_bytes()).into()
}

struct Appender {
    file: File,
    end: u64,
}

pub struct EmbeddingCache {
    path: PathBuf,
    model_id: String,
    dimension: usize,
    reader: File,
    index: RwLock<HashMap<[u8; HASH_LEN], u64>>,
    appender: Mutex<Appender>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("path", &self.path)
            .field("model_id", &self.model_id)
            .field("dimension", &self.dimension)
            .field("len", &self.len())
            .finish()
    }
}

fn cache_err(path: &Path, detail: impl std::fmt::Display) -> EmbedError {
    EmbedError::Cache(format!("{}: {detail}", path.display()))
}

/// File name for a model id: a readable slug plus a short digest so that
/// ids differing only in punctuation never share a file.
pub fn cache_file_name(model_id: &str) -> String {
    let slug: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .take(64)
        .collect();
    let digest = hex::encode(&sentence_hash(model_id)[..4]);
    format!("{slug}-{digest}.emb")
}

fn header_bytes(model_id: &str, dimension: usize) -> Vec<u8> {
    let mut h = Vec::with_capacity(12 + model_id.len());
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&(model_id.len() as u32).to_le_bytes());
    h.extend_from_slice(model_id.as_bytes());
    h.extend_from_slice(&(dimension as u32).to_le_bytes());
    h
}

enum Header {
    Valid { model_id: String, dimension: usize },
    Corrupt(String),
}

fn read_header(r: &mut impl Read) -> std::io::Result<Header> {
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return Ok(Header::Corrupt("bad magic".into()));
    }
    let mut word = [0u8; 4];
    if r.read_exact(&mut word).is_err() {
        return Ok(Header::Corrupt("truncated header".into()));
    }
    let id_len = u32::from_le_bytes(word) as usize;
    if id_len > 1 << 16 {
        return Ok(Header::Corrupt("implausible model id length".into()));
    }
    let mut id = vec![0u8; id_len];
    if r.read_exact(&mut id).is_err() || r.read_exact(&mut word).is_err() {
        return Ok(Header::Corrupt("truncated header".into()));
    }
    let Ok(model_id) = String::from_utf8(id) else {
        return Ok(Header::Corrupt("model id is not UTF-8".into()));
    };
    Ok(Header::Valid {
        model_id,
        dimension: u32::from_le_bytes(word) as usize,
    })
}

impl EmbeddingCache {
    /// Open (or create) the cache for `model_id` inside `dir`.
    pub fn open(dir: &Path, model_id: &str, dimension: usize) -> Result<Self, EmbedError> {
        std::fs::create_dir_all(dir)?;
        Self::open_file(&dir.join(cache_file_name(model_id)), model_id, dimension)
    }

    pub fn open_file(path: &Path, model_id: &str, dimension: usize) -> Result<Self, EmbedError> {
        if dimension == 0 {
            return Err(cache_err(path, "dimension must be positive"));
        }
        let header = header_bytes(model_id, dimension);
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let file_len = file.metadata()?.len();

        let mut start_fresh = file_len == 0;
        if !start_fresh {
            match read_header(&mut BufReader::new(&mut file))? {
                Header::Valid {
                    model_id: found,
                    dimension: d,
                } => {
                    if found != model_id {
                        return Err(cache_err(path, format!("belongs to model `{found}`, not `{model_id}`")));
                    }
                    if d != dimension {
                        return Err(cache_err(
                            path,
                            format!("stores dimension {d}, provider reports {dimension}"),
                        ));
                    }
                }
                Header::Corrupt(why) => {
                    let aside = path.with_extension("emb.corrupt");
                    log::warn!("{}: {why}; moving it to {} and starting fresh", path.display(), aside.display());
                    drop(file);
                    std::fs::rename(path, &aside)?;
                    file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
                    start_fresh = true;
                }
            }
        }
        if start_fresh {
            file.set_len(0)?;
            file.seek(SeekFrom::Start(0))?;
            file.write_all(&header)?;
            file.sync_data()?;
        }

        let header_len = header.len() as u64;
        let record_len = (HASH_LEN + 4 * dimension) as u64;
        let file_len = file.metadata()?.len();
        let whole = (file_len - header_len) / record_len;
        let end = header_len + whole * record_len;
        if end != file_len {
            log::warn!(
                "{}: dropping {} trailing byte(s) of a truncated record",
                path.display(),
                file_len - end
            );
            file.set_len(end)?;
        }

        let mut index = HashMap::with_capacity(whole as usize);
        let mut skipped = 0usize;
        file.seek(SeekFrom::Start(header_len))?;
        let mut reader = BufReader::new(&mut file);
        let mut record = vec![0u8; record_len as usize];
        for k in 0..whole {
            reader.read_exact(&mut record)?;
            let finite = record[HASH_LEN..]
                .chunks_exact(4)
                .all(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite());
            if !finite {
                skipped += 1;
                continue;
            }
            let hash: [u8; HASH_LEN] = record[..HASH_LEN].try_into().expect("hash slice");
            // first write wins; stored vectors never change
            index.entry(hash).or_insert(header_len + k * record_len);
        }
        drop(reader);
        if skipped > 0 {
            log::warn!("{}: skipped {skipped} record(s) with non-finite values", path.display());
        }

        let mut appender = file.try_clone()?;
        appender.seek(SeekFrom::Start(end))?;
        Ok(Self {
            path: path.to_path_buf(),
            model_id: model_id.to_string(),
            dimension,
            reader: file,
            index: RwLock::new(index),
            appender: Mutex::new(Appender { file: appender, end }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, sentence: &str) -> bool {
        self.index
            .read()
            .expect("cache index poisoned")
            .contains_key(&sentence_hash(sentence))
    }

    pub fn get(&self, sentence: &str) -> Result<Option<Vec<f32>>, EmbedError> {
        let offset = {
            let index = self.index.read().expect("cache index poisoned");
            match index.get(&sentence_hash(sentence)) {
                Some(&o) => o,
                None => return Ok(None),
            }
        };
        let mut buf = vec![0u8; 4 * self.dimension];
        self.reader.read_exact_at(&mut buf, offset + HASH_LEN as u64)?;
        Ok(Some(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ))
    }

    /// Store `vector` for `sentence`. A sentence already present keeps its
    /// original vector.
    pub fn put(&self, sentence: &str, vector: &[f32]) -> Result<(), EmbedError> {
        if vector.len() != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                model_id: self.model_id.clone(),
                expected: self.dimension,
                got: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(cache_err(&self.path, "refusing to store a non-finite vector"));
        }
        let hash = sentence_hash(sentence);
        let mut appender = self.appender.lock().expect("cache appender poisoned");
        if self.index.read().expect("cache index poisoned").contains_key(&hash) {
            return Ok(());
        }
        let mut record = Vec::with_capacity(HASH_LEN + 4 * self.dimension);
        record.extend_from_slice(&hash);
        for x in vector {
            record.extend_from_slice(&x.to_le_bytes());
        }
        let offset = appender.end;
        appender.file.write_all(&record)?;
        appender.end += record.len() as u64;
        self.index.write().expect("cache index poisoned").insert(hash, offset);
        Ok(())
    }

    pub fn flush(&self) -> Result<(), EmbedError> {
        self.appender.lock().expect("cache appender poisoned").file.sync_data()?;
        Ok(())
    }
}
