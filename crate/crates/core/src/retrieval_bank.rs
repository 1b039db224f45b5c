//! Captioned memory bank: hashed caption embeddings, exact inner-product
//! top-K retrieval, a versioned cache of precomputed memory tokens, and seeded
//! subsetting.
//!
//! On disk a bank is a directory holding `manifest` (JSON) and `blobs/*.dmem`.
//! The manifest carries a checksum over everything except `created` and the
//! checksum itself, so a torn or hand-edited manifest is detected on open.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, sha256_hex};
use crate::latent_codec::LatentVideo;
use crate::memory_encoder::{MemoryEncoder, MemoryTokens, Span};
use crate::rng::stream;

pub const DEFAULT_D_EMBED: usize = 256;
pub const DEFAULT_TOP_K: usize = 5;
pub const MANIFEST_FILE: &str = "manifest";
pub const BLOB_DIR: &str = "blobs";
const EMBED_SEED: u64 = 0x0dd_b0a7_ca97;
const MANIFEST_FORMAT: u32 = 1;

/// Lowercased alphanumeric words.
pub fn caption_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hashed bag-of-words embedding, L2-normalized.
pub fn embed_caption(text: &str, d_embed: usize) -> Result<Array1<f64>> {
    if d_embed == 0 {
        return Err(Error::invalid("d_embed must be positive"));
    }
    let words = caption_words(text);
    if words.is_empty() {
        return Err(Error::invalid("caption has no words"));
    }
    let mut v = Array1::<f64>::zeros(d_embed);
    for w in &words {
        v[(fnv1a64(EMBED_SEED, w.as_bytes()) % d_embed as u64) as usize] += 1.0;
    }
    let norm = v.dot(&v).sqrt();
    Ok(v / norm)
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::invalid("embedding must be finite and nonzero"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub id: String,
    pub caption: String,
    pub caption_embedding: Vec<f64>,
    /// Relative to the bank root.
    pub latent_ref: String,
    pub tokens_ref: Option<String>,
    pub encoder_version: Option<String>,
    #[serde(default)]
    pub token_spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format: u32,
    pub d_embed: usize,
    pub codec_fingerprint: String,
    pub latent_shape: [usize; 4],
    pub blob_dtype: Dtype,
    pub entries: Vec<BankEntry>,
    pub created: String,
    pub checksum: String,
}

impl BankManifest {
    /// SHA-256 over the manifest with `created` and `checksum` blanked.
    pub fn compute_checksum(&self) -> String {
        let mut copy = self.clone();
        copy.created.clear();
        copy.checksum.clear();
        sha256_hex(serde_json::to_string(&copy).expect("manifest serializes").as_bytes())
    }
}

/// Creation stamp: `SOURCE_DATE_EPOCH` when set (reproducible builds), the
/// wall clock otherwise. Not covered by the checksum.
pub fn creation_stamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
    format!("unix:{secs}")
}

/// A ranked retrieval hit.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub index: usize,
    pub score: f64,
}

/// Descending score, then ascending id.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    root: PathBuf,
    manifest: BankManifest,
    embeddings: Array2<f64>,
}

impl MemoryBank {
    /// An empty bank rooted at `root`; nothing is written until [`Self::save`].
    pub fn create(root: &Path, codec_fingerprint: &str, latent_shape: [usize; 4], d_embed: usize, dtype: Dtype) -> Result<Self> {
        if d_embed == 0 {
            return Err(Error::invalid("d_embed must be positive"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest: BankManifest {
                format: MANIFEST_FORMAT,
                d_embed,
                codec_fingerprint: codec_fingerprint.to_string(),
                latent_shape,
                blob_dtype: dtype,
                entries: Vec::new(),
                created: String::new(),
                checksum: String::new(),
            },
            embeddings: Array2::zeros((0, d_embed)),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BankManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Corrupt {
                path,
                reason: format!("unsupported manifest format {}", manifest.format),
            });
        }
        if manifest.checksum != manifest.compute_checksum() {
            return Err(Error::Corrupt {
                path,
                reason: "manifest checksum mismatch (partial or edited write)".into(),
            });
        }
        let mut bank = Self {
            root: root.to_path_buf(),
            embeddings: Array2::zeros((0, manifest.d_embed)),
            manifest,
        };
        bank.validate()?;
        bank.rebuild_matrix();
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.manifest.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate bank id '{}'", e.id)));
            }
            if e.caption_embedding.len() != self.manifest.d_embed {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.manifest.d_embed],
                    actual: vec![e.caption_embedding.len()],
                });
            }
            if e.tokens_ref.is_some() && e.encoder_version.is_none() {
                return Err(Error::invalid(format!("entry '{}' has tokens without a version", e.id)));
            }
        }
        Ok(())
    }

    fn rebuild_matrix(&mut self) {
        let d = self.manifest.d_embed;
        let mut m = Array2::zeros((self.manifest.entries.len(), d));
        for (i, e) in self.manifest.entries.iter().enumerate() {
            m.row_mut(i).assign(&Array1::from(e.caption_embedding.clone()));
        }
        self.embeddings = m;
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.manifest.entries
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn entry(&self, id: &str) -> Option<&BankEntry> {
        self.manifest.entries.iter().find(|e| e.id == id)
    }

    fn blob_name(id: &str, kind: &str) -> String {
        let safe: String = id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{BLOB_DIR}/{safe}-{:08x}.{kind}.dmem", fnv1a64(0, id.as_bytes()) as u32)
    }

    /// Adds an entry with the default caption embedding and writes its latent blob.
    pub fn add(&mut self, id: &str, caption: &str, latent: &LatentVideo) -> Result<()> {
        let emb = embed_caption(caption, self.manifest.d_embed)?;
        self.add_with_embedding(id, caption, emb.as_slice().expect("contiguous"), latent)
    }

    /// Adds an entry with an externally computed embedding (normalized here).
    pub fn add_with_embedding(&mut self, id: &str, caption: &str, embedding: &[f64], latent: &LatentVideo) -> Result<()> {
        if self.entry(id).is_some() {
            return Err(Error::invalid(format!("duplicate bank id '{id}'")));
        }
        if embedding.len() != self.manifest.d_embed {
            return Err(Error::ShapeMismatch {
                expected: vec![self.manifest.d_embed],
                actual: vec![embedding.len()],
            });
        }
        if latent.codec_fingerprint != self.manifest.codec_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.manifest.codec_fingerprint.clone(),
                found: latent.codec_fingerprint.clone(),
            });
        }
        if latent.shape() != self.manifest.latent_shape {
            return Err(Error::ShapeMismatch {
                expected: self.manifest.latent_shape.to_vec(),
                actual: latent.shape().to_vec(),
            });
        }
        let latent_ref = Self::blob_name(id, "latent");
        blob::save(&self.root.join(&latent_ref), &latent.data, self.manifest.blob_dtype)?;
        self.manifest.entries.push(BankEntry {
            id: id.to_string(),
            caption: caption.to_string(),
            caption_embedding: normalize(embedding)?,
            latent_ref,
            tokens_ref: None,
            encoder_version: None,
            token_spans: Vec::new(),
        });
        let row = Array1::from(self.manifest.entries.last().expect("just pushed").caption_embedding.clone());
        self.embeddings.push_row(row.view()).expect("width checked above");
        Ok(())
    }

    /// Writes the manifest atomically (temp file, then rename).
    pub fn save(&mut self) -> Result<()> {
        self.manifest.created = creation_stamp();
        self.manifest.checksum = self.manifest.compute_checksum();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        blob::write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load_latent(&self, id: &str) -> Result<LatentVideo> {
        let e = self.entry(id).ok_or_else(|| Error::NotFound(format!("bank entry '{id}'")))?;
        let data = blob::load(&self.root.join(&e.latent_ref))?;
        if data.shape() != self.manifest.latent_shape {
            return Err(Error::Corrupt {
                path: self.root.join(&e.latent_ref),
                reason: format!("latent shape {:?} disagrees with manifest", data.shape()),
            });
        }
        Ok(LatentVideo {
            data,
            codec_fingerprint: self.manifest.codec_fingerprint.clone(),
        })
    }

    /// Cached tokens for `id`, served only when their version equals `live_version`.
    pub fn cached_tokens(&self, id: &str, live_version: &str) -> Result<Option<MemoryTokens>> {
        let e = self.entry(id).ok_or_else(|| Error::NotFound(format!("bank entry '{id}'")))?;
        match (&e.tokens_ref, &e.encoder_version) {
            (Some(r), Some(v)) if v == live_version => {
                let path = self.root.join(r);
                let tokens = blob::load(&path)?
                    .into_dimensionality::<Ix2>()
                    .map_err(|err| Error::Corrupt {
                        path: path.clone(),
                        reason: err.to_string(),
                    })?;
                Ok(Some(MemoryTokens {
                    tokens,
                    spans: e.token_spans.clone(),
                    encoder_version: v.clone(),
                }))
            }
            _ => Ok(None),
        }
    }

    /// Number of entries whose cache is missing or stale for `live_version`.
    pub fn stale_count(&self, live_version: &str) -> usize {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.encoder_version.as_deref() != Some(live_version) || e.tokens_ref.is_none())
            .count()
    }

    /// Encodes every entry lacking current tokens, persists the blobs, and
    /// rewrites the manifest atomically. Returns the number of entries updated.
    pub fn precompute_tokens(&mut self, encoder: &MemoryEncoder) -> Result<usize> {
        if encoder.codec_fingerprint() != self.manifest.codec_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: encoder.codec_fingerprint().to_string(),
                found: self.manifest.codec_fingerprint.clone(),
            });
        }
        let version = encoder.encoder_version().to_string();
        let mut updated = 0;
        for i in 0..self.manifest.entries.len() {
            let e = &self.manifest.entries[i];
            if e.tokens_ref.is_some() && e.encoder_version.as_deref() == Some(version.as_str()) {
                continue;
            }
            let id = e.id.clone();
            let latent = self.load_latent(&id)?;
            let tokens = encoder.encode_reference(&id, &latent)?;
            let tokens_ref = Self::blob_name(&id, "tokens");
            blob::save(&self.root.join(&tokens_ref), &tokens.tokens.clone().into_dyn(), self.manifest.blob_dtype)?;
            let e = &mut self.manifest.entries[i];
            e.tokens_ref = Some(tokens_ref);
            e.encoder_version = Some(version.clone());
            e.token_spans = tokens.spans;
            updated += 1;
        }
        if updated > 0 {
            self.save()?;
        }
        Ok(updated)
    }

    /// Exact inner-product scores against every entry, ranked.
    pub fn query_embedding(&self, q: &Array1<f64>, k: usize) -> Result<Vec<Hit>> {
        self.query_over(q, k, None)
    }

    pub fn query_topk(&self, prompt: &str, k: usize) -> Result<Vec<Hit>> {
        let q = embed_caption(prompt, self.manifest.d_embed)?;
        self.query_embedding(&q, k)
    }

    fn query_over(&self, q: &Array1<f64>, k: usize, subset: Option<&[usize]>) -> Result<Vec<Hit>> {
        let n = subset.map(|s| s.len()).unwrap_or(self.len());
        if n == 0 {
            return Err(Error::invalid("bank is empty"));
        }
        if k == 0 || k > n {
            return Err(Error::invalid(format!("K={k} outside 1..={n}")));
        }
        if q.len() != self.manifest.d_embed {
            return Err(Error::ShapeMismatch {
                expected: vec![self.manifest.d_embed],
                actual: vec![q.len()],
            });
        }
        // Sequential sums keep scores independent of BLAS blocking.
        let score = |i: usize| self.embeddings.row(i).iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>();
        let idx: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..self.len()).collect(),
        };
        let mut hits: Vec<Hit> = idx
            .into_iter()
            .map(|i| Hit {
                id: self.manifest.entries[i].id.clone(),
                index: i,
                score: score(i),
            })
            .collect();
        hits.sort_by(rank);
        hits.truncate(k);
        Ok(hits)
    }

    /// Seeded sample of `ceil(fraction * N)` entries without replacement.
    pub fn subset(&self, fraction: f64, seed: u64) -> Result<BankView<'_>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let n = self.len();
        let k = subset_size(n, fraction);
        let mut rng = stream(seed, "bank-subset", n as u64);
        let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        Ok(BankView {
            bank: self,
            indices: picked,
            fraction,
            seed,
        })
    }
}

/// `ceil(fraction * n)`, guarding against float noise such as `0.05 * 400`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(usize::from(n > 0), n)
}

/// A read-only subset of a bank; queries see only its entries.
#[derive(Clone, Debug)]
pub struct BankView<'a> {
    bank: &'a MemoryBank,
    indices: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

impl BankView<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.indices.iter().map(|&i| self.bank.manifest.entries[i].id.clone()).collect()
    }

    pub fn query_topk(&self, prompt: &str, k: usize) -> Result<Vec<Hit>> {
        let q = embed_caption(prompt, self.bank.manifest.d_embed)?;
        self.bank.query_over(&q, k, Some(&self.indices))
    }
}

/// Subset description persisted by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub fraction: f64,
    pub seed: u64,
    pub bank_checksum: String,
    pub ids: Vec<String>,
}

impl BankView<'_> {
    pub fn to_manifest(&self) -> SubsetManifest {
        SubsetManifest {
            fraction: self.fraction,
            seed: self.seed,
            bank_checksum: self.bank.manifest.compute_checksum(),
            ids: self.ids(),
        }
    }
}
