//! Superclass guidance: relevance maps `L^{T1}` and their complements `L^{T2}`.
//!
//! Two providers are included: a ground-truth-mask oracle with optional seeded
//! corruption, and a frozen vision-language model whose maps are GradCAM of the
//! image/text cosine similarity. Maps are cached on disk once per sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use super_autograd::{ConvGeometry, Tensor, Var};

use crate::attribution::{self, complement, AttributionMap, MapSource};
use crate::data::{GroupedDataset, Image, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{decode_tensors, encode_tensors, header_end, FeatureStack};

/// The `n` text prompts describing the superclass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    prompts: Vec<String>,
}

/// Templates for `n = 1, 2, 5`; `{}` is the superclass with its article.
const PROMPT_TEMPLATES: [&str; 5] = ["{}", "a photo of {}", "a picture of {}", "an image of {}", "{} photograph"];

fn with_article(superclass: &str) -> String {
    let vowel = superclass.chars().next().is_some_and(|c| "aeiouAEIOU".contains(c));
    format!("{} {superclass}", if vowel { "an" } else { "a" })
}

impl PromptSet {
    /// Keeps the first occurrence of each prompt.
    pub fn new(prompts: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in prompts {
            let p: String = p.into();
            let p = p.trim().to_string();
            if p.is_empty() {
                return Err(Error::Config("empty prompt".into()));
            }
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("prompt set must contain at least one prompt".into()));
        }
        Ok(PromptSet { prompts: out })
    }

    /// The standard variants for `n ∈ {1, 2, 5}`.
    pub fn standard(superclass: &str, n: usize) -> Result<Self> {
        if ![1, 2, 5].contains(&n) {
            return Err(Error::Config(format!("prompt count must be 1, 2 or 5, got {n}")));
        }
        if superclass.trim().is_empty() {
            return Err(Error::Config("superclass must be nonempty".into()));
        }
        let phrase = with_article(superclass.trim());
        PromptSet::new(PROMPT_TEMPLATES[..n].iter().map(|t| t.replace("{}", &phrase)))
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Hex SHA-256 over the newline-joined prompts.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.prompts.join("\n").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One row of a prompt-variants file: `n,superclass`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptVariant {
    pub n: usize,
    pub superclass: String,
}

impl PromptVariant {
    pub fn prompt_set(&self) -> Result<PromptSet> {
        PromptSet::standard(&self.superclass, self.n)
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.n, self.superclass)
    }
}

/// Parses `n,superclass` lines; `#` starts a comment.
pub fn parse_prompt_variants(text: &str) -> Result<Vec<PromptVariant>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Config(format!("prompt variants line {}: expected `n,superclass`", lineno + 1));
        let (n, superclass) = line.split_once(',').ok_or_else(bad)?;
        let variant = PromptVariant { n: n.trim().parse().map_err(|_| bad())?, superclass: superclass.trim().to_string() };
        variant.prompt_set()?;
        out.push(variant);
    }
    if out.is_empty() {
        return Err(Error::Config("prompt variants file lists no variants".into()));
    }
    Ok(out)
}

/// Relevant map and its complement for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePair {
    pub relevant: AttributionMap,
    pub irrelevant: AttributionMap,
    pub provider_tag: String,
    pub sample_id: String,
}

impl GuidancePair {
    pub fn from_relevant(relevant: AttributionMap, provider_tag: &str, sample_id: &str) -> Self {
        let mut relevant = relevant;
        relevant.source = MapSource::GuidanceRelevant;
        let irrelevant = complement(&relevant);
        GuidancePair { relevant, irrelevant, provider_tag: provider_tag.into(), sample_id: sample_id.into() }
    }
}

/// Everything a cached map depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheKey {
    pub provider_tag: String,
    pub prompt_hash: String,
    pub height: usize,
    pub width: usize,
    pub corruption: f64,
    pub seed: u64,
}

impl CacheKey {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("provider_tag", &self.provider_tag);
        kv.set("prompt_hash", &self.prompt_hash);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("corruption", self.corruption);
        kv.set("seed", self.seed);
        kv
    }

    fn from_key_values(kv: &KeyValues) -> Result<Self> {
        Ok(CacheKey {
            provider_tag: kv.require("provider_tag")?,
            prompt_hash: kv.require("prompt_hash")?,
            height: kv.require("height")?,
            width: kv.require("width")?,
            corruption: kv.require("corruption")?,
            seed: kv.require("seed")?,
        })
    }
}

pub trait GuidanceProvider {
    fn cache_key(&self) -> CacheKey;

    /// Normalised relevance map at the key's resolution.
    fn relevant_map(&self, record: &SampleRecord) -> Result<AttributionMap>;

    fn guidance(&self, record: &SampleRecord) -> Result<GuidancePair> {
        let map = self.relevant_map(record)?;
        Ok(GuidancePair::from_relevant(map, &self.cache_key().provider_tag, &record.id))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded per-id draw used to rank samples for corruption.
pub fn corruption_draw(seed: u64, id: &str) -> u64 {
    splitmix64(fnv1a(id.as_bytes()) ^ seed)
}

/// Ground-truth foreground masks as guidance.
///
/// With corruption rate `c`, exactly `round(c·n)` samples of each split, those
/// with the smallest [`corruption_draw`], receive the complement of their mask.
#[derive(Clone, Debug)]
pub struct OracleGuidance {
    height: usize,
    width: usize,
    corruption: f64,
    seed: u64,
    corrupted: BTreeSet<String>,
}

impl OracleGuidance {
    pub fn new(ds: &GroupedDataset, height: usize, width: usize, corruption: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&corruption) {
            return Err(Error::Config(format!("corruption rate must lie in [0, 1), got {corruption}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Config("guidance resolution must be positive".into()));
        }
        let mut corrupted = BTreeSet::new();
        for split in Split::ALL {
            let mut ranked: Vec<(u64, &str)> = ds.split(split).map(|r| (corruption_draw(seed, &r.id), r.id.as_str())).collect();
            ranked.sort_unstable();
            let n = (corruption * ranked.len() as f64).round() as usize;
            corrupted.extend(ranked[..n].iter().map(|(_, id)| id.to_string()));
        }
        Ok(OracleGuidance { height, width, corruption, seed, corrupted })
    }

    pub fn is_corrupted(&self, id: &str) -> bool {
        self.corrupted.contains(id)
    }

    pub fn corrupted_ids(&self) -> &BTreeSet<String> {
        &self.corrupted
    }
}

impl GuidanceProvider for OracleGuidance {
    fn cache_key(&self) -> CacheKey {
        CacheKey {
            provider_tag: "oracle".into(),
            prompt_hash: "none".into(),
            height: self.height,
            width: self.width,
            corruption: self.corruption,
            seed: self.seed,
        }
    }

    fn relevant_map(&self, record: &SampleRecord) -> Result<AttributionMap> {
        let mask = record
            .foreground_mask
            .as_ref()
            .ok_or_else(|| Error::MissingGuidance(format!("sample {} has no foreground mask", record.id)))?;
        let grid = attribution::resample_grid(&mask.as_f64(), mask.height, mask.width, self.height, self.width);
        let mut values = attribution::minmax_normalize(&grid)?;
        if self.is_corrupted(&record.id) {
            values.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        AttributionMap::new(self.height, self.width, values, MapSource::GuidanceRelevant)
    }
}

/// A frozen image/text model exposing its last convolutional feature maps.
pub trait VisionLanguageModel {
    fn tag(&self) -> &str;

    /// `[K, h, w]` feature maps, computed outside any autodiff graph.
    fn feature_maps(&self, image: &Image) -> Result<FeatureStack>;

    /// Image embedding `[1, E]` from `[1, K, h, w]` maps. Weights enter as constants.
    fn embed_maps<'g>(&self, maps: Var<'g>) -> Var<'g>;

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// `z·t / (‖z‖‖t‖)` on the graph, for `[1, E]` inputs.
pub fn cosine_similarity<'g>(z: Var<'g>, t: Var<'g>) -> Var<'g> {
    (z * t).sum() / ((z.square().sum() * t.square().sum()).sqrt())
}

/// GradCAM of the cosine similarity for every prompt, normalised and averaged.
pub fn vlm_guidance(
    sample_id: &str,
    image: &Image,
    prompts: &PromptSet,
    vlm: &dyn VisionLanguageModel,
) -> Result<GuidancePair> {
    let stack = vlm.feature_maps(image)?;
    let mut maps = Vec::with_capacity(prompts.len());
    for prompt in prompts.prompts() {
        let text = vlm.embed_text(prompt)?;
        let e = text.len();
        let (map, _) = attribution::gradcam(&stack, MapSource::GuidanceRelevant, |a| {
            let t = a.graph().constant(Tensor::new(vec![1, e], text.clone()));
            cosine_similarity(vlm.embed_maps(a), t)
        })?;
        maps.push(map);
    }
    let relevant = attribution::average_maps(&maps)?;
    Ok(GuidancePair::from_relevant(relevant, vlm.tag(), sample_id))
}

pub const VLM_MAGIC: &str = "SUPER-VLM-1";

/// A small seeded stand-in for a contrastive image/text model.
///
/// The image tower is two 3×3 convolutions followed by average pooling and a
/// linear projection; the text tower sums hashed character-trigram embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyClip {
    pub seed: u64,
    pub embed_dim: usize,
    pub vocab: usize,
    tensors: Vec<Tensor>,
}

impl TinyClip {
    const NAMES: [&str; 6] = ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "proj", "text_table"];

    fn layout(embed_dim: usize, vocab: usize) -> Vec<(String, Vec<usize>)> {
        let shapes = [vec![8, 3, 3, 3], vec![1, 8, 1, 1], vec![16, 8, 3, 3], vec![1, 16, 1, 1], vec![16, embed_dim], vec![vocab, embed_dim]];
        Self::NAMES.iter().map(|s| s.to_string()).zip(shapes).collect()
    }

    pub fn new(seed: u64) -> Self {
        let (embed_dim, vocab) = (32, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = Self::layout(embed_dim, vocab)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let fan_in = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
                let bound = if name.ends_with("bias") { 0.1 } else { (6.0 / fan_in as f64).sqrt() };
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
            })
            .collect();
        TinyClip { seed, embed_dim, vocab, tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut kv = KeyValues::default();
        kv.set("seed", self.seed);
        kv.set("embed_dim", self.embed_dim);
        kv.set("vocab", self.vocab);
        let mut buf = format!("{VLM_MAGIC}\n{}end\n", kv.to_text()).into_bytes();
        let names: Vec<String> = Self::NAMES.iter().map(|s| s.to_string()).collect();
        encode_tensors(&mut buf, &names, &self.tensors);
        fs::write(path, buf).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(Error::io(path))?;
        let bad = |what: &str| Error::Schema(format!("vlm weights {}: {what}", path.display()));
        let end = header_end(&bytes).ok_or_else(|| bad("header terminator not found"))?;
        let header = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| bad("header is not UTF-8"))?;
        let (magic, rest) = header.split_once('\n').ok_or_else(|| bad("empty header"))?;
        if magic != VLM_MAGIC {
            return Err(bad(&format!("magic is `{magic}`, expected `{VLM_MAGIC}`")));
        }
        let kv = KeyValues::parse(rest)?;
        let (seed, embed_dim, vocab) = (kv.require("seed")?, kv.require("embed_dim")?, kv.require("vocab")?);
        let tensors = decode_tensors(&bytes[end + 5..], &Self::layout(embed_dim, vocab)).map_err(|e| bad(&e))?;
        Ok(TinyClip { seed, embed_dim, vocab, tensors })
    }

    /// Stable identifier of these weights, folded into the cache key.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl VisionLanguageModel for TinyClip {
    fn tag(&self) -> &str {
        "vlm"
    }

    fn feature_maps(&self, image: &Image) -> Result<FeatureStack> {
        let x = Image::batch([image]);
        let t = &self.tensors;
        let relu = |v: f64| v.max(0.0);
        let a = super_autograd::tensor::conv2d(&x, &t[0], ConvGeometry { stride: 1, padding: 1 });
        let a = a.zip_broadcast(&t[1], |u, b| relu(u + b));
        let a = super_autograd::tensor::conv2d(&a, &t[2], ConvGeometry { stride: 2, padding: 1 });
        let a = a.zip_broadcast(&t[3], |u, b| relu(u + b));
        let s = a.shape().to_vec();
        FeatureStack::new(a.reshape(&s[1..]))
    }

    fn embed_maps<'g>(&self, maps: Var<'g>) -> Var<'g> {
        let s = maps.shape();
        let hw = s[2] * s[3];
        let pooled = maps.reshape(&[s[0], s[1], hw]).sum_axis_keep(2).reshape(&[s[0], s[1]]) * (1.0 / hw as f64);
        pooled.matmul(maps.graph().constant(self.tensors[4].clone()))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        if prompt.trim().is_empty() {
            return Err(Error::Invalid("cannot encode an empty prompt".into()));
        }
        let padded: Vec<char> = format!("^{}$", prompt.trim().to_lowercase()).chars().collect();
        let table = &self.tensors[5];
        let mut out = vec![0.0; self.embed_dim];
        for tri in padded.windows(3) {
            let key: String = tri.iter().collect();
            let row = (fnv1a(key.as_bytes()) % self.vocab as u64) as usize;
            for (o, v) in out.iter_mut().zip(&table.data()[row * self.embed_dim..(row + 1) * self.embed_dim]) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// A vision-language model with prompts, resampled to the classifier's grid.
pub struct VlmGuidance<M: VisionLanguageModel> {
    pub model: M,
    pub prompts: PromptSet,
    pub height: usize,
    pub width: usize,
    pub fingerprint: String,
}

impl<M: VisionLanguageModel> GuidanceProvider for VlmGuidance<M> {
    fn cache_key(&self) -> CacheKey {
        CacheKey {
            provider_tag: self.model.tag().into(),
            prompt_hash: format!("{}-{}", self.prompts.hash(), self.fingerprint),
            height: self.height,
            width: self.width,
            corruption: 0.0,
            seed: 0,
        }
    }

    fn relevant_map(&self, record: &SampleRecord) -> Result<AttributionMap> {
        let pair = vlm_guidance(&record.id, &record.image, &self.prompts, &self.model)?;
        attribution::resample(&pair.relevant, self.height, self.width)
    }
}

const CACHE_META: &str = "cache.meta";

/// `root/<provider_tag>/<sample_id>.map` files holding relevant maps.
#[derive(Clone, Debug)]
pub struct GuidanceCache {
    dir: PathBuf,
    key: CacheKey,
}

impl GuidanceCache {
    /// Opens or creates the cache for `key`; an existing cache built under a different key is an error.
    pub fn open(root: &Path, key: CacheKey) -> Result<Self> {
        let dir = root.join(&key.provider_tag);
        let meta = dir.join(CACHE_META);
        if meta.exists() {
            Self::check_meta(&meta, &key)?;
        } else {
            fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            atomic_write(&meta, key.to_key_values().to_text().as_bytes())?;
        }
        Ok(GuidanceCache { dir, key })
    }

    /// Opens an existing cache without creating anything.
    pub fn open_existing(root: &Path, key: CacheKey) -> Result<Self> {
        let cache = Self::open_tag(root, &key.provider_tag)?;
        if cache.key != key {
            return Err(Error::CacheMismatch(format!(
                "{} was built for {:?}, requested {key:?}",
                cache.dir.display(),
                cache.key
            )));
        }
        Ok(cache)
    }

    /// Opens the existing cache for `provider_tag` under whatever key it was built with.
    pub fn open_tag(root: &Path, provider_tag: &str) -> Result<Self> {
        let dir = root.join(provider_tag);
        let meta = dir.join(CACHE_META);
        if !meta.exists() {
            let available = available_tags(root);
            if available.is_empty() {
                return Err(Error::MissingGuidance(format!("no guidance cache under {}", root.display())));
            }
            return Err(Error::CacheMismatch(format!(
                "cache under {} holds {:?}, requested `{provider_tag}`",
                root.display(),
                available
            )));
        }
        let text = fs::read_to_string(&meta).map_err(Error::io(&meta))?;
        let key = CacheKey::from_key_values(&KeyValues::parse(&text)?)?;
        Ok(GuidanceCache { dir, key })
    }

    fn check_meta(meta: &Path, key: &CacheKey) -> Result<()> {
        let text = fs::read_to_string(meta).map_err(Error::io(meta))?;
        let found = CacheKey::from_key_values(&KeyValues::parse(&text)?)?;
        if &found != key {
            return Err(Error::CacheMismatch(format!("{} was built for {found:?}, requested {key:?}", meta.display())));
        }
        Ok(())
    }

    pub fn key(&self) -> &CacheKey {
        &self.key
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.map"))
    }

    pub fn load(&self, id: &str) -> Result<Option<GuidancePair>> {
        let path = self.path(id);
        if !path.exists() {
            return Ok(None);
        }
        let map = AttributionMap::read_sidecar(&path, MapSource::GuidanceRelevant)?;
        if (map.height(), map.width()) != (self.key.height, self.key.width) {
            return Err(Error::CacheMismatch(format!("{} has the wrong resolution", path.display())));
        }
        Ok(Some(GuidancePair::from_relevant(map, &self.key.provider_tag, id)))
    }

    pub fn store(&self, pair: &GuidancePair) -> Result<()> {
        atomic_write(&self.path(&pair.sample_id), pair.relevant.to_sidecar().as_bytes())
    }
}

fn available_tags(root: &Path) -> Vec<String> {
    let mut tags: Vec<String> = fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().join(CACHE_META).exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    tags.sort();
    tags
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Guidance for a set of samples, keyed by id.
#[derive(Clone, Debug, Default)]
pub struct GuidanceTable {
    pairs: BTreeMap<String, GuidancePair>,
    /// Provider invocations made while building the table.
    pub provider_calls: usize,
}

impl GuidanceTable {
    pub fn get(&self, id: &str) -> Result<&GuidancePair> {
        self.pairs.get(id).ok_or_else(|| Error::MissingGuidance(format!("no guidance for sample {id}")))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn insert(&mut self, pair: GuidancePair) {
        self.pairs.insert(pair.sample_id.clone(), pair);
    }

    /// Resolves guidance for every sample of `split`: cache hits are read back,
    /// misses go to the provider and are written to the cache.
    pub fn resolve(
        ds: &GroupedDataset,
        split: Split,
        cache: Option<&GuidanceCache>,
        provider: Option<&dyn GuidanceProvider>,
    ) -> Result<Self> {
        let mut table = GuidanceTable::default();
        for record in ds.split(split) {
            if let Some(pair) = cache.map(|c| c.load(&record.id)).transpose()?.flatten() {
                table.insert(pair);
                continue;
            }
            let provider = provider.ok_or_else(|| {
                Error::MissingGuidance(format!("sample {} is not cached and no provider is configured", record.id))
            })?;
            let pair = provider.guidance(record)?;
            table.provider_calls += 1;
            if let Some(c) = cache {
                c.store(&pair)?;
            }
            table.insert(pair);
        }
        Ok(table)
    }
}
