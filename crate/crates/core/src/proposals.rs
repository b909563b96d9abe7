//! Selective Search region proposals and their on-disk cache.
//!
//! Segmentation is the graph-based method of Felzenszwalb and
//! Huttenlocher; grouping merges neighboring regions greedily by color,
//! size and fill similarity (no texture term) and records the box of every
//! region ever formed.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxN, BoxSet};
use crate::pipeline::image::{load_image, ImageTensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub segment_count: usize,
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Largest internal edge weight of each component.
    internal: Vec<f32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n as u32).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32, weight: f32) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = weight;
        big
    }
}

/// Graph-based segmentation on the 4-connected pixel grid. Edge weights are
/// Euclidean RGB distances on the 0–255 scale.
pub fn felzenszwalb_segment(img: &ImageTensor, k: f64, min_size: usize) -> Result<SegmentLabelMap> {
    if k <= 0.0 || min_size == 0 {
        return Err(Error::Contract(format!("segmentation needs k > 0 and min_size >= 1, got k={k} min_size={min_size}")));
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let dist = |a: usize, b: usize| -> f32 {
        let (pa, pb) = (&img.data()[a * 3..a * 3 + 3], &img.data()[b * 3..b * 3 + 3]);
        (0..3).map(|c| ((pa[c] - pb[c]) * 255.0).powi(2)).sum::<f32>().sqrt()
    };
    let mut edges: Vec<(f32, u32, u32)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((dist(i, i + 1), i as u32, (i + 1) as u32));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i as u32, (i + w) as u32));
            }
        }
    }
    // Stable sort keeps ties in scan order.
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut ds = DisjointSet::new(n);
    let k = k as f32;
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra as usize] + k / ds.size[ra as usize] as f32;
        let tb = ds.internal[rb as usize] + k / ds.size[rb as usize] as f32;
        if wt <= ta.min(tb) {
            ds.union(ra, rb, wt);
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra as usize] < min_size as u32 || ds.size[rb as usize] < min_size as u32) {
            let keep = ds.internal[ra as usize].max(ds.internal[rb as usize]);
            ds.union(ra, rb, keep);
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut next = 0u32;
    for i in 0..n {
        let r = ds.find(i as u32) as usize;
        if remap[r] == u32::MAX {
            remap[r] = next;
            next += 1;
        }
        labels.push(remap[r]);
    }
    Ok(SegmentLabelMap { width: w, height: h, labels, segment_count: next as usize })
}

const HIST_BINS: usize = 25;

#[derive(Debug, Clone)]
struct Region {
    /// Pixel bounds, inclusive min and exclusive max.
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
    size: usize,
    /// `3 × HIST_BINS`, L1-normalized.
    hist: Vec<f64>,
}

impl Region {
    fn bbox_area(&self, other: &Region) -> usize {
        (self.x2.max(other.x2) - self.x1.min(other.x1)) * (self.y2.max(other.y2) - self.y1.min(other.y1))
    }

    fn merge(&self, other: &Region) -> Region {
        let (a, b) = (self.size as f64, other.size as f64);
        Region {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
            size: self.size + other.size,
            hist: self.hist.iter().zip(&other.hist).map(|(x, y)| (x * a + y * b) / (a + b)).collect(),
        }
    }

    fn to_box(&self, w: usize, h: usize) -> BoxN {
        let (w, h) = (w as f64, h as f64);
        BoxN::from_corners(self.x1 as f64 / w, self.y1 as f64 / h, self.x2 as f64 / w, self.y2 as f64 / h)
            .expect("region inside image")
    }
}

fn similarity(a: &Region, b: &Region, image_area: f64) -> f64 {
    let color: f64 = a.hist.iter().zip(&b.hist).map(|(x, y)| x.min(*y)).sum();
    let size = 1.0 - (a.size + b.size) as f64 / image_area;
    let fill = 1.0 - (a.bbox_area(b) as f64 - a.size as f64 - b.size as f64) / image_area;
    color + size + fill
}

#[derive(Debug, PartialEq)]
struct Candidate {
    sim: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Highest similarity first; ties go to the lowest region pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Boxes of every region in the merge tree: the `s` segments followed by
/// the `s − 1` merges, in merge order. Not deduplicated.
pub fn merge_tree(seg: &SegmentLabelMap, img: &ImageTensor) -> Result<Vec<BoxN>> {
    let (w, h) = (seg.width, seg.height);
    if img.width() != w || img.height() != h || seg.labels.len() != w * h {
        return Err(Error::Shape(format!("segmentation is {w}x{h}, image {}x{}", img.width(), img.height())));
    }
    let s = seg.segment_count;
    let mut regions: Vec<Region> = (0..s)
        .map(|_| Region { x1: usize::MAX, y1: usize::MAX, x2: 0, y2: 0, size: 0, hist: vec![0.0; 3 * HIST_BINS] })
        .collect();
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); s];
    for y in 0..h {
        for x in 0..w {
            let l = seg.labels[y * w + x] as usize;
            let r = &mut regions[l];
            r.x1 = r.x1.min(x);
            r.y1 = r.y1.min(y);
            r.x2 = r.x2.max(x + 1);
            r.y2 = r.y2.max(y + 1);
            r.size += 1;
            for (c, v) in img.pixel(y, x).iter().enumerate() {
                let bin = ((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                r.hist[c * HIST_BINS + bin] += 1.0;
            }
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h {
                    let m = seg.labels[ny * w + nx] as usize;
                    if m != l {
                        adjacency[l].insert(m);
                        adjacency[m].insert(l);
                    }
                }
            }
        }
    }
    for r in &mut regions {
        let total: f64 = r.hist.iter().sum();
        r.hist.iter_mut().for_each(|v| *v /= total);
    }

    let image_area = (w * h) as f64;
    let mut boxes: Vec<BoxN> = regions.iter().map(|r| r.to_box(w, h)).collect();
    let mut alive = vec![true; s];
    let mut heap = BinaryHeap::new();
    for (a, nbrs) in adjacency.iter().enumerate() {
        for &b in nbrs.range(a + 1..) {
            heap.push(Candidate { sim: similarity(&regions[a], &regions[b], image_area), a, b });
        }
    }
    while let Some(Candidate { a, b, .. }) = heap.pop() {
        if !alive[a] || !alive[b] {
            continue;
        }
        alive[a] = false;
        alive[b] = false;
        let merged = regions[a].merge(&regions[b]);
        let id = regions.len();
        boxes.push(merged.to_box(w, h));
        let nbrs: BTreeSet<usize> =
            adjacency[a].union(&adjacency[b]).copied().filter(|&n| n != a && n != b && alive[n]).collect();
        for &n in &nbrs {
            adjacency[n].insert(id);
            heap.push(Candidate { sim: similarity(&regions[n], &merged, image_area), a: n, b: id });
        }
        regions.push(merged);
        alive.push(true);
        adjacency.push(nbrs);
    }
    Ok(boxes)
}

/// Removes boxes identical to an earlier one at 1e-4 granularity.
pub fn dedup_boxes(boxes: impl IntoIterator<Item = BoxN>) -> Vec<BoxN> {
    let mut seen = HashSet::new();
    boxes
        .into_iter()
        .filter(|b| seen.insert(b.to_array().map(|v| (v as f64 * 1e4).round() as i64)))
        .collect()
}

pub fn hierarchical_group(seg: &SegmentLabelMap, img: &ImageTensor, image_id: &str) -> Result<BoxSet> {
    Ok(BoxSet::new(image_id, dedup_boxes(merge_tree(seg, img)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsParams {
    pub scales: Vec<f64>,
    pub min_size: usize,
}

impl Default for SsParams {
    fn default() -> Self {
        SsParams { scales: vec![100.0, 300.0], min_size: 20 }
    }
}

pub fn selective_search(img: &ImageTensor, params: &SsParams, image_id: &str) -> Result<BoxSet> {
    let mut all = Vec::new();
    for &k in &params.scales {
        let seg = felzenszwalb_segment(img, k, params.min_size)?;
        all.extend(merge_tree(&seg, img)?);
    }
    Ok(BoxSet::new(image_id, dedup_boxes(all)))
}

/// Every proposal of one image.
pub type ProposalCacheEntry = BoxSet;

const CACHE_MAGIC: &[u8; 4] = b"PSSC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalCache {
    pub entries: Vec<ProposalCacheEntry>,
}

impl ProposalCache {
    pub fn get(&self, image_id: &str) -> Option<&ProposalCacheEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Serialized bytes and the byte offset of every entry.
    pub fn encode(&self) -> (Vec<u8>, Vec<u64>) {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offsets = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            offsets.push(out.len() as u64);
            out.extend_from_slice(&(e.image_id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.image_id.as_bytes());
            out.extend_from_slice(&(e.boxes.len() as u32).to_le_bytes());
            for b in &e.boxes {
                for v in b.to_array() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        (out, offsets)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err("bad magic, expected PSSC".into());
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(format!("unsupported cache version {version}"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "image id is not UTF-8".to_string())?;
            let n = r.u32()? as usize;
            let mut boxes = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let v = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
                boxes.push(BoxN::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())?);
            }
            entries.push(BoxSet::new(id, boxes));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(ProposalCache { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ProposalCache::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len())
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub image_id: String,
    /// `None` when the image could not be read.
    pub offset: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheManifest {
    pub lines: Vec<ManifestLine>,
}

impl CacheManifest {
    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(|l| match l.offset {
                Some(o) => format!("{}\t{o}\n", l.image_id),
                None => format!("{}\tskipped\n", l.image_id),
            })
            .collect()
    }

    pub fn skipped(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter(|l| l.offset.is_none()).map(|l| l.image_id.as_str())
    }
}

/// Manifest written next to a cache file.
pub fn manifest_path(cache: &Path) -> PathBuf {
    let mut name = cache.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

/// `.ppm` files of a directory as `(image_id, path)`, sorted by id. The id
/// is the file stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Runs Selective Search over a directory in parallel and writes the cache
/// and its manifest in image-id order. Unreadable images are skipped and
/// marked in the manifest.
pub fn precompute_cache(dir: &Path, params: &SsParams, out: &Path) -> Result<CacheManifest> {
    let images = list_images(dir)?;
    let results: Vec<(String, Option<BoxSet>)> = images
        .par_iter()
        .map(|(id, path)| {
            let boxes = load_image(path).and_then(|img| selective_search(&img, params, id));
            match boxes {
                Ok(b) => (id.clone(), Some(b)),
                Err(e) => {
                    tracing::warn!("skipping {id}: {e}");
                    (id.clone(), None)
                }
            }
        })
        .collect();

    let cache = ProposalCache { entries: results.iter().filter_map(|(_, b)| b.clone()).collect() };
    let (bytes, offsets) = cache.encode();
    let mut offsets = offsets.into_iter();
    let manifest = CacheManifest {
        lines: results
            .iter()
            .map(|(id, b)| ManifestLine { image_id: id.clone(), offset: b.as_ref().and_then(|_| offsets.next()) })
            .collect(),
    };
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    let mpath = manifest_path(out);
    fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// `K` boxes drawn uniformly: without replacement when the entry holds at
/// least `K`, with replacement otherwise, and `K` full-image boxes when it
/// is empty.
pub fn sample_boxes(entry: &ProposalCacheEntry, k: usize, rng: &mut impl Rng) -> BoxSet {
    let n = entry.len();
    let boxes = if n == 0 {
        vec![BoxN::full(); k]
    } else if n >= k {
        index::sample(rng, n, k).into_iter().map(|i| entry.boxes[i]).collect()
    } else {
        (0..k).map(|_| entry.boxes[rng.gen_range(0..n)]).collect()
    };
    BoxSet::new(entry.image_id.clone(), boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::image::save_image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn halves() -> ImageTensor {
        let mut img = ImageTensor::filled(10, 12, [0.1, 0.1, 0.1]);
        for y in 0..10 {
            for x in 6..12 {
                img.set_pixel(y, x, [0.9, 0.8, 0.2]);
            }
        }
        img
    }

    fn noise(seed: u64, side: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..side * side * 3).map(|_| rng.gen::<f32>()).collect();
        ImageTensor::new(side, side, data).unwrap()
    }

    #[test]
    fn uniform_is_one_segment() {
        let img = ImageTensor::filled(8, 8, [0.3, 0.3, 0.3]);
        let seg = felzenszwalb_segment(&img, 100.0, 1).unwrap();
        assert_eq!(seg.segment_count, 1);
        let ss = selective_search(&img, &SsParams { scales: vec![100.0], min_size: 20 }, "u").unwrap();
        assert_eq!(ss.boxes, vec![BoxN::full()]);
    }

    #[test]
    fn two_halves_two_segments() {
        let img = halves();
        let seg = felzenszwalb_segment(&img, 10.0, 1).unwrap();
        assert_eq!(seg.segment_count, 2);
        let boxes = hierarchical_group(&seg, &img, "h").unwrap();
        assert_eq!(boxes.len(), 3);
        assert!(boxes.boxes.contains(&BoxN::full()));
    }

    #[test]
    fn one_segment_one_box() {
        let img = halves();
        let seg = SegmentLabelMap { width: 12, height: 10, labels: vec![0; 120], segment_count: 1 };
        assert_eq!(hierarchical_group(&seg, &img, "x").unwrap().boxes, vec![BoxN::full()]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(felzenszwalb_segment(&halves(), 0.0, 1).is_err());
        assert!(felzenszwalb_segment(&halves(), 1.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn segmentation_postconditions(seed in 0u64..1000, min_size in 1usize..30, k in 1.0f64..500.0) {
            let img = noise(seed, 16);
            let seg = felzenszwalb_segment(&img, k, min_size).unwrap();
            let mut sizes = vec![0usize; seg.segment_count];
            for &l in &seg.labels {
                prop_assert!((l as usize) < seg.segment_count);
                sizes[l as usize] += 1;
            }
            prop_assert!(sizes.iter().all(|&s| s >= min_size.min(256)));
            let tree = merge_tree(&seg, &img).unwrap();
            prop_assert_eq!(tree.len(), 2 * seg.segment_count - 1);
        }
    }

    #[test]
    fn search_is_deterministic_and_valid() {
        let img = noise(3, 24);
        let a = selective_search(&img, &SsParams::default(), "n").unwrap();
        let b = selective_search(&img, &SsParams::default(), "n").unwrap();
        assert_eq!(a, b);
        let keys: HashSet<_> = a.boxes.iter().map(|b| b.to_array().map(|v| (v as f64 * 1e4).round() as i64)).collect();
        assert_eq!(keys.len(), a.len());
        for b in &a.boxes {
            let (x1, y1, x2, y2) = b.to_corners();
            assert!(x1 >= -1e-6 && y1 >= -1e-6 && x2 <= 1.0 + 1e-6 && y2 <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn cache_round_trip_and_offsets() {
        let cache = ProposalCache {
            entries: vec![
                BoxSet::new("a", vec![BoxN::new(0.1, 0.2, 0.3, 0.4).unwrap()]),
                BoxSet::new("bé", vec![]),
                BoxSet::new("c", vec![BoxN::full(), BoxN::new(0.5, 0.5, 0.123_456_7, 0.2).unwrap()]),
            ],
        };
        let (bytes, offsets) = cache.encode();
        assert_eq!(offsets[0], 12);
        assert_eq!(offsets[1], 12 + 4 + 1 + 4 + 16);
        let back = ProposalCache::decode(&bytes).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.encode().0, bytes);
        assert!(ProposalCache::decode(&bytes[..bytes.len() - 2]).unwrap_err().contains("truncated"));
        assert!(ProposalCache::decode(b"XXXX").is_err());
    }

    #[test]
    fn precompute_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (i, seed) in [1u64, 2, 3].iter().enumerate() {
            save_image(&noise(*seed, 12), &dir.path().join(format!("img{i}.ppm"))).unwrap();
        }
        fs::write(dir.path().join("broken.ppm"), b"P6\n4 4\n255\n\x00").unwrap();
        let out = dir.path().join("cache.pssc");
        let manifest = precompute_cache(dir.path(), &SsParams::default(), &out).unwrap();
        assert_eq!(manifest.lines.len(), 4);
        assert_eq!(manifest.skipped().collect::<Vec<_>>(), vec!["broken"]);
        let text = fs::read_to_string(manifest_path(&out)).unwrap();
        assert!(text.starts_with("broken\tskipped\nimg0\t12\n"));

        let first = fs::read(&out).unwrap();
        let cache = ProposalCache::load(&out).unwrap();
        assert_eq!(cache.entries.len(), 3);
        precompute_cache(dir.path(), &SsParams::default(), &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), first);
    }

    #[test]
    fn empty_directory_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.pssc");
        let m = precompute_cache(dir.path(), &SsParams::default(), &out).unwrap();
        assert!(m.lines.is_empty());
        assert!(ProposalCache::load(&out).unwrap().entries.is_empty());
    }

    #[test]
    fn sampling_rules() {
        let many = BoxSet::new("m", (0..100).map(|i| BoxN::new(0.5, 0.5, 0.005 + i as f32 / 200.0, 0.5).unwrap()).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_boxes(&many, 0, &mut rng).is_empty());

        let a = sample_boxes(&many, 30, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_boxes(&many, 30, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let distinct: HashSet<u32> = a.boxes.iter().map(|b| b.w.to_bits()).collect();
        assert_eq!(distinct.len(), 30);

        let few = BoxSet::new("f", many.boxes[..5].to_vec());
        let s = sample_boxes(&few, 30, &mut rng);
        assert_eq!(s.len(), 30);
        assert!(s.boxes.iter().all(|b| few.boxes.contains(b)));

        let empty = BoxSet::new("e", vec![]);
        assert_eq!(sample_boxes(&empty, 4, &mut rng).boxes, vec![BoxN::full(); 4]);
    }
}
