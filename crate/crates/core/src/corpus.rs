//! Paired text-image data: vocabulary and bag-of-words loaders, the
//! synthetic shapes dataset with oracle labels, multi-resolution image
//! pyramids, and PPM image I/O.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::rng::{Purpose, RandomStream};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Ordered token list; the index of a token is its term id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> crate::Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty vocabulary".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let tok = line.trim().to_string();
            if tok.is_empty() {
                continue;
            }
            if index.insert(tok.clone(), tokens.len() as u32).is_some() {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("duplicate token {tok:?}"),
                ));
            }
            tokens.push(tok);
        }
        if tokens.is_empty() {
            return Err(Error::parse(path, 0, "empty vocabulary"));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

// ---------------------------------------------------------------------------
// CountVector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountKind {
    Counts,
    Binary,
}

/// Sparse nonnegative bag-of-words (or binary attribute) vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVector {
    entries: BTreeMap<u32, u32>,
    kind: CountKind,
}

impl CountVector {
    pub fn empty() -> Self {
        CountVector {
            entries: BTreeMap::new(),
            kind: CountKind::Counts,
        }
    }

    pub fn from_entries(entries: BTreeMap<u32, u32>) -> crate::Result<Self> {
        if entries.values().any(|&c| c == 0) {
            return Err(Error::Invalid("sparse count of zero".into()));
        }
        Ok(CountVector {
            entries,
            kind: CountKind::Counts,
        })
    }

    pub fn kind(&self) -> CountKind {
        self.kind
    }

    pub fn entries(&self) -> &BTreeMap<u32, u32> {
        &self.entries
    }

    pub fn get(&self, term: u32) -> u32 {
        self.entries.get(&term).copied().unwrap_or(0)
    }

    pub fn add(&mut self, term: u32, count: u32) {
        if count > 0 {
            *self.entries.entry(term).or_insert(0) += count;
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|&c| c as u64).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bernoulli-Poisson link: b = 1(t >= 1).
    pub fn binarize_bp(&self) -> CountVector {
        CountVector {
            entries: self.entries.keys().map(|&k| (k, 1)).collect(),
            kind: CountKind::Binary,
        }
    }

    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut d = vec![0.0; vocab_size];
        for (&k, &c) in &self.entries {
            d[k as usize] = c as f64;
        }
        d
    }
}

/// Parse a corpus file: one document per line, `doc_id<TAB>term:count ...`.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> crate::Result<Vec<(String, CountVector)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let k0 = vocab.size() as u32;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let (doc_id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "missing tab separator"))?;
        let mut entries = BTreeMap::new();
        for part in rest.split_whitespace() {
            let (term, count) = part
                .split_once(':')
                .ok_or_else(|| Error::parse(path, lineno, format!("malformed entry {part:?}")))?;
            let term: u32 = term
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad term id {term:?}")))?;
            let count: i64 = count
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad count {count:?}")))?;
            if term >= k0 {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("term id {term} out of range (vocabulary size {k0})"),
                ));
            }
            if count <= 0 {
                return Err(Error::parse(path, lineno, format!("count {count} <= 0")));
            }
            if entries.insert(term, count as u32).is_some() {
                return Err(Error::parse(path, lineno, format!("repeated term {term}")));
            }
        }
        if entries.is_empty() {
            eprintln!("note: {}:{lineno}: empty document {doc_id:?}", path.display());
        }
        docs.push((doc_id.to_string(), CountVector::from_entries(entries)?));
    }
    Ok(docs)
}

pub fn save_corpus(path: &Path, docs: &[(String, CountVector)]) -> crate::Result<()> {
    let mut out = String::new();
    for (id, doc) in docs {
        out.push_str(id);
        out.push('\t');
        let mut first = true;
        for (&term, &count) in doc.entries() {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{term}:{count}");
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Oracle label attached to synthetic images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLabel {
    pub class: u16,
    pub color: u8,
    pub shape: u8,
    pub quadrant: u8,
}

/// An RGB image with values in [0, 1], stored channel-first (3, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub label: Option<OracleLabel>,
}

impl ImageRecord {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> crate::Result<Self> {
        if !width.is_power_of_two() || !height.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "image sides must be powers of two, got {width}x{height}"
            )));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "image data length {} for {width}x{height}",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ImageRecord {
            width,
            height,
            data,
            label: None,
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("image dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> crate::Result<Self> {
        if t.rank() != 3 || t.dims()[0] != 3 {
            return Err(Error::Shape(format!("image tensor dims {:?}", t.dims())));
        }
        ImageRecord::new(t.dims()[2], t.dims()[1], t.data().to_vec())
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let off = y * self.width + x;
        [
            self.data[off],
            self.data[plane + off],
            self.data[2 * plane + off],
        ]
    }
}

/// Multi-resolution stack, coarsest first; the finest level is the source.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    levels: Vec<Tensor<f32>>,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[Tensor<f32>] {
        &self.levels
    }

    pub fn finest(&self) -> &Tensor<f32> {
        self.levels.last().expect("pyramid has levels")
    }

    /// Level with the given side length, if present.
    pub fn at_side(&self, side: usize) -> Option<&Tensor<f32>> {
        self.levels.iter().find(|t| t.dims()[2] == side)
    }
}

/// Build `levels` resolutions by repeated 2x2 average pooling.
pub fn build_pyramid(img: &ImageRecord, levels: usize) -> crate::Result<ImagePyramid> {
    if levels == 0 {
        return Err(Error::Invalid("pyramid needs at least one level".into()));
    }
    let div = 1usize << (levels - 1);
    if img.width % div != 0 || img.height % div != 0 {
        return Err(Error::Invalid(format!(
            "side {}x{} not divisible by 2^{}",
            img.width,
            img.height,
            levels - 1
        )));
    }
    let mut stack = vec![img.to_tensor()];
    for _ in 1..levels {
        let prev = stack.last().unwrap();
        let (h, w) = (prev.dims()[1], prev.dims()[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::<f32>::zeros(&[3, ho, wo]);
        {
            let src = prev.data();
            let dst = out.data_mut();
            for c in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += src[c * h * w + (oy * 2 + dy) * w + ox * 2 + dx] as f64;
                            }
                        }
                        dst[c * ho * wo + oy * wo + ox] = (acc * 0.25) as f32;
                    }
                }
            }
        }
        stack.push(out);
    }
    stack.reverse();
    Ok(ImagePyramid { levels: stack })
}

// ---------------------------------------------------------------------------
// PPM I/O (P6, 8-bit)
// ---------------------------------------------------------------------------

pub fn write_ppm(path: &Path, img: &ImageRecord) -> crate::Result<()> {
    let mut buf = Vec::with_capacity(img.width * img.height * 3 + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(y, x);
            for c in p {
                buf.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> crate::Result<ImageRecord> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // Header: magic, width, height, maxval; '#' comments run to end of line.
    while fields.len() < 4 {
        if pos >= bytes.len() {
            return Err(Error::parse(path, 0, "truncated PPM header"));
        }
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" {
        return Err(Error::parse(path, 0, format!("not a P6 PPM: {}", fields[0])));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(path, 0, "bad width"))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, 0, "bad height"))?;
    if fields[3] != "255" {
        return Err(Error::parse(path, 0, "only 8-bit PPM supported"));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::parse(path, 0, "truncated PPM payload"));
    }
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in bytes[pos..pos + need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    ImageRecord::new(width, height, data)
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPE_WORDS: [&str; 3] = ["circle", "square", "triangle"];
pub const POSITION_WORDS: [&str; 4] = ["upper", "lower", "left", "right"];

const COLOR_RGB: [[f32; 3]; 4] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.75, 0.12],
    [0.12, 0.15, 0.85],
    [0.88, 0.82, 0.10],
];

const DISTRACTOR_WORDS: [&str; 39] = [
    "the", "a", "an", "image", "scene", "shows", "with", "small", "on", "over", "near",
    "background", "texture", "grain", "field", "plain", "soft", "light", "dark", "edge",
    "corner", "center", "single", "solid", "flat", "round", "wide", "tall", "big", "tiny",
    "object", "figure", "mark", "spot", "patch", "area", "region", "view", "frame",
];

/// The fixed 50-token template vocabulary.
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = Vec::with_capacity(50);
    tokens.extend(COLOR_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(SHAPE_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(POSITION_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(DISTRACTOR_WORDS.iter().map(|s| s.to_string()));
    Vocabulary::from_tokens(tokens).expect("template vocabulary is valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    pub docs_per_class: usize,
    /// Classes held out of the train split entirely (diagonal color=shape
    /// pairs, so held-out classes differ in both attributes).
    pub n_unseen: usize,
    /// Fraction of each seen class moved to the test split.
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: 32,
            n_colors: 4,
            n_shapes: 3,
            docs_per_class: 50,
            n_unseen: 2,
            test_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitTag {
    pub train: bool,
    pub seen_class: bool,
}

/// In-memory paired dataset; documents and images are aligned by index.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub vocab: Vocabulary,
    pub doc_ids: Vec<String>,
    pub docs: Vec<CountVector>,
    pub images: Vec<ImageRecord>,
    pub splits: Vec<SplitTag>,
    pub classes: Vec<u16>,
    pub class_names: Vec<String>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i].train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.splits[i].train).collect()
    }

    pub fn unseen_class_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = (0..self.len())
            .filter(|&i| !self.splits[i].seen_class)
            .map(|i| self.classes[i])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Shapes deliberately differ in covered area (circle largest, square
/// smallest) so that even global color statistics separate every
/// (color, shape) class.
fn shape_mask(shape: u8, side: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r * 0.62 && dy.abs() <= r * 0.62,
                // Upward triangle: apex at cy - r, base at cy + r.
                _ => {
                    let h = 2.0 * r;
                    let t = (dy + r) / h; // 0 at apex, 1 at base
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * r
                }
            };
            if inside {
                mask[y * side + x] = true;
            }
        }
    }
    mask
}

fn render_shape_image(
    side: usize,
    color: u8,
    shape: u8,
    quadrant: u8,
    rng: &mut RandomStream,
) -> ImageRecord {
    let q = side as f64 / 4.0;
    let (cx, cy) = match quadrant {
        0 => (q, q),
        1 => (3.0 * q, q),
        2 => (q, 3.0 * q),
        _ => (3.0 * q, 3.0 * q),
    };
    let r = side as f64 * 0.24;
    let mask = shape_mask(shape, side, cx, cy, r);
    let rgb = COLOR_RGB[color as usize];
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        if mask[i] {
            let shade = rng.uniform_range(-0.03, 0.03);
            for c in 0..3 {
                data[c * plane + i] = quantize(rgb[c] as f64 + shade);
            }
        } else {
            // Class-independent low-amplitude noise texture.
            let base = 0.42 + rng.uniform_range(-0.05, 0.05);
            for c in 0..3 {
                let v = base + rng.uniform_range(-0.02, 0.02);
                data[c * plane + i] = quantize(v);
            }
        }
    }
    let mut img = ImageRecord::new(side, side, data).expect("power-of-two side");
    img.label = Some(OracleLabel {
        class: 0, // filled by caller
        color,
        shape,
        quadrant,
    });
    img
}

/// Snap to the 8-bit grid so PPM round-trips are bit-exact.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn synth_document(
    vocab: &Vocabulary,
    color: u8,
    shape: u8,
    quadrant: u8,
    rng: &mut RandomStream,
) -> CountVector {
    let mut cv = CountVector::empty();
    let vert = if quadrant < 2 { "upper" } else { "lower" };
    let horz = if quadrant % 2 == 0 { "left" } else { "right" };
    let label_words = [
        COLOR_WORDS[color as usize],
        SHAPE_WORDS[shape as usize],
        vert,
        horz,
    ];
    for w in label_words {
        let id = vocab.id(w).expect("template word");
        cv.add(id, rng.poisson(3.0) as u32 + 1);
    }
    for tok in vocab.tokens() {
        if label_words.contains(&tok.as_str()) {
            continue;
        }
        let c = rng.poisson(0.3) as u32;
        if c > 0 {
            cv.add(vocab.id(tok).unwrap(), c);
        }
    }
    cv
}

/// Generate the oracle-labeled synthetic dataset. Pure function of
/// (config, seed): the same inputs give a bit-identical dataset.
pub fn make_synthetic_shapes(cfg: &SynthConfig, seed: u64) -> crate::Result<PairedDataset> {
    if !cfg.side.is_power_of_two() {
        return Err(Error::Invalid(format!(
            "image side {} is not a power of two",
            cfg.side
        )));
    }
    if cfg.n_colors > COLOR_WORDS.len() || cfg.n_shapes > SHAPE_WORDS.len() {
        return Err(Error::Invalid("too many colors/shapes for template".into()));
    }
    if cfg.n_unseen > cfg.n_colors.min(cfg.n_shapes) {
        return Err(Error::Invalid(
            "n_unseen exceeds the diagonal of color x shape".into(),
        ));
    }
    let vocab = synthetic_vocabulary();
    let n_classes = cfg.n_colors * cfg.n_shapes;
    let unseen: Vec<u16> = (0..cfg.n_unseen)
        .map(|k| (k * cfg.n_shapes + k) as u16)
        .collect();
    let mut ds = PairedDataset {
        vocab,
        doc_ids: Vec::new(),
        docs: Vec::new(),
        images: Vec::new(),
        splits: Vec::new(),
        classes: Vec::new(),
        class_names: (0..n_classes)
            .map(|c| {
                format!(
                    "{}_{}",
                    COLOR_WORDS[c / cfg.n_shapes],
                    SHAPE_WORDS[c % cfg.n_shapes]
                )
            })
            .collect(),
    };
    let train_cut = ((cfg.docs_per_class as f64) * (1.0 - cfg.test_frac)).ceil() as usize;
    for class in 0..n_classes as u16 {
        let color = (class as usize / cfg.n_shapes) as u8;
        let shape = (class as usize % cfg.n_shapes) as u8;
        let seen = !unseen.contains(&class);
        for d in 0..cfg.docs_per_class {
            let pair_index = class as u64 * cfg.docs_per_class as u64 + d as u64;
            let mut rng = RandomStream::new(seed, Purpose::Synthetic, pair_index, 0);
            let quadrant = rng.below(4) as u8;
            let mut img = render_shape_image(cfg.side, color, shape, quadrant, &mut rng);
            if let Some(l) = img.label.as_mut() {
                l.class = class;
            }
            let doc = synth_document(&ds.vocab, color, shape, quadrant, &mut rng);
            ds.doc_ids.push(format!("d{pair_index:05}"));
            ds.docs.push(doc);
            ds.images.push(img);
            ds.classes.push(class);
            ds.splits.push(SplitTag {
                train: seen && d < train_cut,
                seen_class: seen,
            });
        }
    }
    Ok(ds)
}

/// One bag-of-words description per class for zero-shot galleries: the
/// label words at their expected counts, no position or distractor words.
pub fn class_document(vocab: &Vocabulary, class: u16, n_shapes: usize) -> CountVector {
    let color = class as usize / n_shapes;
    let shape = class as usize % n_shapes;
    let mut cv = CountVector::empty();
    cv.add(vocab.id(COLOR_WORDS[color]).unwrap(), 4);
    cv.add(vocab.id(SHAPE_WORDS[shape]).unwrap(), 4);
    cv
}

// ---------------------------------------------------------------------------
// Oracle classifier for synthetic images
// ---------------------------------------------------------------------------

/// Estimate (color, shape, quadrant) of an image by color histogram over the
/// saturated foreground plus template matching. Exact on rendered synthetic
/// data; used to score generated images.
pub fn oracle_classify(img: &ImageRecord) -> OracleLabel {
    let (w, h) = (img.width, img.height);
    let mut mask = vec![false; w * h];
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            let mx = p[0].max(p[1]).max(p[2]);
            let mn = p[0].min(p[1]).min(p[2]);
            if mx - mn > 0.3 {
                mask[y * w + x] = true;
                any = true;
            }
        }
    }
    if !any {
        // No saturated region at all; degenerate guess.
        return OracleLabel {
            class: 0,
            color: 0,
            shape: 0,
            quadrant: 0,
        };
    }
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0f64);
    let mut mean = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1.0;
                let p = img.pixel(y, x);
                for c in 0..3 {
                    mean[c] += p[c] as f64;
                }
            }
        }
    }
    let (cx, cy) = (sx / n, sy / n);
    for c in mean.iter_mut() {
        *c /= n;
    }
    let quadrant = match (cy < h as f64 / 2.0, cx < w as f64 / 2.0) {
        (true, true) => 0,
        (true, false) => 1,
        (false, true) => 2,
        (false, false) => 3,
    };
    let color = (0..COLOR_RGB.len())
        .min_by(|&a, &b| {
            let da: f64 = (0..3)
                .map(|c| (mean[c] - COLOR_RGB[a][c] as f64).powi(2))
                .sum();
            let db: f64 = (0..3)
                .map(|c| (mean[c] - COLOR_RGB[b][c] as f64).powi(2))
                .sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap() as u8;
    // Shape by best intersection-over-union against templates rendered so
    // that each template's own centroid lands on the detected centroid
    // (the triangle's centroid sits r/3 below its nominal center).
    let r = w as f64 * 0.24;
    let mut best = (0u8, -1.0f64);
    for shape in 0..3u8 {
        let cy_t = if shape == 2 { cy - r / 3.0 } else { cy };
        let tmpl = shape_mask(shape, w, cx, cy_t, r);
        let mut inter = 0.0;
        let mut union = 0.0;
        for i in 0..w * h {
            match (mask[i], tmpl[i]) {
                (true, true) => {
                    inter += 1.0;
                    union += 1.0;
                }
                (true, false) | (false, true) => union += 1.0,
                _ => {}
            }
        }
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        if iou > best.1 {
            best = (shape, iou);
        }
    }
    OracleLabel {
        class: 0,
        color,
        shape: best.0,
        quadrant,
    }
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
// ---------------------------------------------------------------------------

pub fn save_dataset(dir: &Path, ds: &PairedDataset) -> crate::Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    ds.vocab.save(&dir.join("vocab.txt"))?;
    let docs: Vec<(String, CountVector)> = ds
        .doc_ids
        .iter()
        .cloned()
        .zip(ds.docs.iter().cloned())
        .collect();
    save_corpus(&dir.join("corpus.tsv"), &docs)?;
    let mut manifest = String::new();
    let mut labels = String::new();
    for i in 0..ds.len() {
        let rel: PathBuf = ["images", &format!("{}.ppm", ds.doc_ids[i])].iter().collect();
        write_ppm(&dir.join(&rel), &ds.images[i])?;
        let _ = writeln!(manifest, "{}\t{}", ds.doc_ids[i], rel.display());
        let l = ds.images[i].label.unwrap_or(OracleLabel {
            class: ds.classes[i],
            color: 0,
            shape: 0,
            quadrant: 0,
        });
        let split = if ds.splits[i].train { "train" } else { "test" };
        let seen = if ds.splits[i].seen_class { "seen" } else { "unseen" };
        let _ = writeln!(
            labels,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ds.doc_ids[i], ds.classes[i], l.color, l.shape, l.quadrant, split, seen
        );
    }
    std::fs::write(dir.join("manifest.tsv"), manifest).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join("labels.tsv"), labels).map_err(|e| Error::io(dir, e))?;
    let mut names = String::new();
    for n in &ds.class_names {
        let _ = writeln!(names, "{n}");
    }
    std::fs::write(dir.join("classes.txt"), names).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> crate::Result<PairedDataset> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let docs = load_corpus(&dir.join("corpus.tsv"), &vocab)?;
    let manifest_path = dir.join("manifest.tsv");
    let manifest =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut image_paths: HashMap<String, PathBuf> = HashMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, rel) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&manifest_path, lineno + 1, "missing tab"))?;
        image_paths.insert(id.to_string(), dir.join(rel));
    }
    let labels_path = dir.join("labels.tsv");
    let mut labels: HashMap<String, (u16, OracleLabel, SplitTag)> = HashMap::new();
    if labels_path.exists() {
        let text =
            std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::parse(&labels_path, lineno + 1, "expected 7 fields"));
            }
            let parse_err =
                |what: &str| Error::parse(&labels_path, lineno + 1, format!("bad {what}"));
            let class: u16 = f[1].parse().map_err(|_| parse_err("class"))?;
            let label = OracleLabel {
                class,
                color: f[2].parse().map_err(|_| parse_err("color"))?,
                shape: f[3].parse().map_err(|_| parse_err("shape"))?,
                quadrant: f[4].parse().map_err(|_| parse_err("quadrant"))?,
            };
            let tag = SplitTag {
                train: f[5] == "train",
                seen_class: f[6] == "seen",
            };
            labels.insert(f[0].to_string(), (class, label, tag));
        }
    }
    let class_file = dir.join("classes.txt");
    let class_names = if class_file.exists() {
        std::fs::read_to_string(&class_file)
            .map_err(|e| Error::io(&class_file, e))?
            .lines()
            .map(|s| s.to_string())
            .collect()
    } else {
        Vec::new()
    };
    let mut ds = PairedDataset {
        vocab,
        doc_ids: Vec::new(),
        docs: Vec::new(),
        images: Vec::new(),
        splits: Vec::new(),
        classes: Vec::new(),
        class_names,
    };
    for (id, doc) in docs {
        let img_path = image_paths
            .get(&id)
            .ok_or_else(|| Error::Invalid(format!("manifest missing image for doc {id}")))?;
        let mut img = read_ppm(img_path)?;
        let (class, label, tag) = labels.get(&id).copied().unwrap_or((
            0,
            OracleLabel {
                class: 0,
                color: 0,
                shape: 0,
                quadrant: 0,
            },
            SplitTag {
                train: true,
                seen_class: true,
            },
        ));
        img.label = Some(label);
        ds.doc_ids.push(id);
        ds.docs.push(doc);
        ds.images.push(img);
        ds.classes.push(class);
        ds.splits.push(tag);
    }
    Ok(ds)
}
