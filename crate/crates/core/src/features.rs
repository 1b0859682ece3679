//! Feature schema, hot encoding, embedding lookup and assembly of the split
//! behavior matrix `[K_h K_c]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Real;
use crate::snapshot::NamedTensor;

/// Width every cross feature must have so it can be compressed to one scalar.
pub const CROSS_DIM: usize = 8;
pub const ID_DIM: usize = 64;
pub const SMALL_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Inherent,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    OneHot,
    MultiHot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub encoding: Encoding,
    pub vocab: usize,
    /// Defaults to 64 for id features (`*_id`) and 8 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

impl FeatureSpec {
    pub fn new(name: &str, kind: FeatureKind, encoding: Encoding, vocab: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            encoding,
            vocab,
            dim: None,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = Some(dim);
        self
    }

    pub fn is_id(&self) -> bool {
        self.name.ends_with("_id")
    }

    pub fn emb_dim(&self) -> usize {
        self.dim
            .unwrap_or(if self.is_id() { ID_DIM } else { SMALL_DIM })
    }
}

/// Vocabulary sizes for the standard schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardVocab {
    pub videos: usize,
    pub authors: usize,
    pub categories: usize,
    pub duration_buckets: usize,
    pub timestamp_buckets: usize,
    pub playtime_buckets: usize,
    pub page_positions: usize,
    pub interaction_flags: usize,
    pub recency_buckets: usize,
}

impl Default for StandardVocab {
    fn default() -> Self {
        Self {
            videos: 10_000,
            authors: 1_000,
            categories: 37,
            duration_buckets: 8,
            timestamp_buckets: 24,
            playtime_buckets: 10,
            page_positions: 8,
            interaction_flags: 4,
            recency_buckets: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = Self { features };
        schema.validate()?;
        Ok(schema)
    }

    /// Two id features (64 wide) and two small inherent features give H = 144;
    /// five cross features give C = 40.
    pub fn standard(v: StandardVocab) -> Self {
        use Encoding::*;
        use FeatureKind::*;
        Self {
            features: vec![
                FeatureSpec::new("video_id", Inherent, OneHot, v.videos),
                FeatureSpec::new("author_id", Inherent, OneHot, v.authors),
                FeatureSpec::new("category", Inherent, OneHot, v.categories),
                FeatureSpec::new("duration_bucket", Inherent, OneHot, v.duration_buckets),
                FeatureSpec::new("timestamp_bucket", Cross, OneHot, v.timestamp_buckets),
                FeatureSpec::new("playtime_bucket", Cross, OneHot, v.playtime_buckets),
                FeatureSpec::new("page_position", Cross, OneHot, v.page_positions),
                FeatureSpec::new("interaction_flags", Cross, MultiHot, v.interaction_flags),
                FeatureSpec::new("recency_bucket", Cross, OneHot, v.recency_buckets),
            ],
        }
    }

    /// Same as [`standard`](Self::standard) with the id features narrowed to `id_dim`.
    pub fn standard_with_id_dim(v: StandardVocab, id_dim: usize) -> Self {
        let mut s = Self::standard(v);
        for f in s.features.iter_mut().filter(|f| f.is_id()) {
            f.dim = Some(id_dim);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (i, f) in self.features.iter().enumerate() {
            if f.name.is_empty() {
                errors.push(format!("feature #{i} has an empty name"));
            }
            if self.features[..i].iter().any(|g| g.name == f.name) {
                errors.push(format!("duplicate feature name '{}'", f.name));
            }
            if f.vocab == 0 {
                errors.push(format!("feature '{}' has vocab 0", f.name));
            }
            if f.emb_dim() == 0 {
                errors.push(format!("feature '{}' has dim 0", f.name));
            }
            if f.kind == FeatureKind::Cross && f.emb_dim() != CROSS_DIM {
                errors.push(format!(
                    "cross feature '{}' must have dim {CROSS_DIM}, got {}",
                    f.name,
                    f.emb_dim()
                ));
            }
        }
        if self.inherent().next().is_none() {
            errors.push("schema has no inherent features".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn inherent(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter().filter(|f| f.kind == FeatureKind::Inherent)
    }

    pub fn cross(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter().filter(|f| f.kind == FeatureKind::Cross)
    }

    /// H.
    pub fn inherent_dim(&self) -> usize {
        self.inherent().map(FeatureSpec::emb_dim).sum()
    }

    /// C.
    pub fn cross_dim(&self) -> usize {
        self.cross().map(FeatureSpec::emb_dim).sum()
    }

    /// J.
    pub fn n_cross(&self) -> usize {
        self.cross().count()
    }

    pub fn n_inherent(&self) -> usize {
        self.inherent().count()
    }

    pub fn find(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Position of an inherent feature within the inherent block.
    pub fn inherent_position(&self, name: &str) -> Option<usize> {
        self.inherent().position(|f| f.name == name)
    }

    pub fn cross_position(&self, name: &str) -> Option<usize> {
        self.cross().position(|f| f.name == name)
    }
}

/// A categorical value: one category, or a set of them for multi-hot features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    One(u32),
    Multi(Vec<u32>),
}

impl FeatureValue {
    pub fn as_slice(&self) -> &[u32] {
        match self {
            FeatureValue::One(v) => std::slice::from_ref(v),
            FeatureValue::Multi(vs) => vs,
        }
    }

    fn check(&self, spec: &FeatureSpec) -> Result<()> {
        if spec.encoding == Encoding::OneHot && !matches!(self, FeatureValue::One(_)) {
            return Err(Error::invalid(format!(
                "feature '{}' is one-hot but got a set",
                spec.name
            )));
        }
        let vals = self.as_slice();
        for (i, &v) in vals.iter().enumerate() {
            if v as usize >= spec.vocab {
                return Err(Error::invalid(format!(
                    "value {v} out of vocab {} for feature '{}'",
                    spec.vocab, spec.name
                )));
            }
            if vals[..i].contains(&v) {
                return Err(Error::invalid(format!(
                    "duplicate value {v} in multi-hot feature '{}'",
                    spec.name
                )));
            }
        }
        Ok(())
    }
}

/// One watched video: its inherent features plus the user-video cross features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub video_id: u64,
    pub inherent: Vec<FeatureValue>,
    pub cross: Vec<FeatureValue>,
    /// Virtual minutes.
    pub event_time: f64,
}

/// The candidate being scored. Carries no cross features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetItem {
    pub video_id: u64,
    pub inherent: Vec<FeatureValue>,
}

/// Binary hot vector of length `vocab`.
pub fn encode_hot<S: Real>(value: &FeatureValue, spec: &FeatureSpec) -> Result<Vec<S>> {
    value.check(spec)?;
    let mut hot = vec![S::zero(); spec.vocab];
    for &v in value.as_slice() {
        hot[v as usize] = S::one();
    }
    Ok(hot)
}

/// Embedding dictionary `E_A` (`dim x vocab`). Stored transposed so that each
/// category's column is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    pub name: String,
    columns: Matrix<S>,
}

impl<S: Real> EmbeddingTable<S> {
    pub fn zeros(name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            columns: Matrix::zeros(vocab, dim),
        }
    }

    pub fn random<R: Rng>(name: &str, vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        Self {
            name: name.to_string(),
            columns: Matrix::from_fn(vocab, dim, |_, _| S::lit(normal.sample(rng))),
        }
    }

    /// Builds from `E_A` in its natural `dim x vocab` orientation.
    pub fn from_matrix(name: &str, e: &Matrix<S>) -> Self {
        Self {
            name: name.to_string(),
            columns: e.transpose(),
        }
    }

    pub fn to_matrix(&self) -> Matrix<S> {
        self.columns.transpose()
    }

    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    pub fn vocab(&self) -> usize {
        self.columns.rows()
    }

    #[inline]
    pub fn column(&self, v: usize) -> &[S] {
        self.columns.row(v)
    }

    #[inline]
    pub fn column_mut(&mut self, v: usize) -> &mut [S] {
        self.columns.row_mut(v)
    }

    pub fn storage(&self) -> &Matrix<S> {
        &self.columns
    }

    pub fn storage_mut(&mut self) -> &mut Matrix<S> {
        &mut self.columns
    }

    /// Snapshot record: header `(name, d_A, v_A)` and `E_A` row-major.
    pub fn to_tensor(&self) -> NamedTensor {
        NamedTensor::from_matrix(self.name.clone(), &self.to_matrix())
    }

    pub fn from_tensor(t: &NamedTensor) -> Result<Self> {
        Ok(Self::from_matrix(&t.name, &t.to_matrix()?))
    }
}

/// `E_A · hot`. Linear in `hot`: a multi-hot code yields the sum of its columns.
pub fn embed<S: Real>(hot: &[S], table: &EmbeddingTable<S>) -> Result<Vec<S>> {
    if hot.len() != table.vocab() {
        return Err(Error::shape("embed", table.vocab(), hot.len()));
    }
    let mut out = vec![S::zero(); table.dim()];
    for (v, &h) in hot.iter().enumerate() {
        if h.is_zero() {
            continue;
        }
        for (o, &e) in out.iter_mut().zip(table.column(v)) {
            *o += h * e;
        }
    }
    Ok(out)
}

/// Embedding tables for every feature of a schema, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables<S> {
    pub schema: FeatureSchema,
    tables: Vec<EmbeddingTable<S>>,
    inherent_idx: Vec<usize>,
    cross_idx: Vec<usize>,
}

impl<S: Real> EmbeddingTables<S> {
    pub fn from_tables(schema: FeatureSchema, tables: Vec<EmbeddingTable<S>>) -> Result<Self> {
        schema.validate()?;
        if tables.len() != schema.features.len() {
            return Err(Error::shape(
                "EmbeddingTables",
                format!("{} tables", schema.features.len()),
                format!("{} tables", tables.len()),
            ));
        }
        for (spec, t) in schema.features.iter().zip(&tables) {
            if t.name != spec.name || t.vocab() != spec.vocab || t.dim() != spec.emb_dim() {
                return Err(Error::shape(
                    "EmbeddingTables",
                    format!("{} ({} x {})", spec.name, spec.emb_dim(), spec.vocab),
                    format!("{} ({} x {})", t.name, t.dim(), t.vocab()),
                ));
            }
        }
        let inherent_idx = (0..schema.features.len())
            .filter(|&i| schema.features[i].kind == FeatureKind::Inherent)
            .collect();
        let cross_idx = (0..schema.features.len())
            .filter(|&i| schema.features[i].kind == FeatureKind::Cross)
            .collect();
        Ok(Self {
            schema,
            tables,
            inherent_idx,
            cross_idx,
        })
    }

    pub fn random<R: Rng>(schema: FeatureSchema, std: f64, rng: &mut R) -> Result<Self> {
        let tables = schema
            .features
            .iter()
            .map(|f| EmbeddingTable::random(&f.name, f.vocab, f.emb_dim(), std, rng))
            .collect();
        Self::from_tables(schema, tables)
    }

    pub fn zeros(schema: FeatureSchema) -> Result<Self> {
        let tables = schema
            .features
            .iter()
            .map(|f| EmbeddingTable::zeros(&f.name, f.vocab, f.emb_dim()))
            .collect();
        Self::from_tables(schema, tables)
    }

    pub fn tables(&self) -> &[EmbeddingTable<S>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [EmbeddingTable<S>] {
        &mut self.tables
    }

    pub fn table(&self, name: &str) -> Option<&EmbeddingTable<S>> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Table index (into [`tables`](Self::tables)) of the `j`-th inherent feature.
    pub fn inherent_table_index(&self, j: usize) -> usize {
        self.inherent_idx[j]
    }

    pub fn cross_table_index(&self, j: usize) -> usize {
        self.cross_idx[j]
    }

    pub fn inherent_dim(&self) -> usize {
        self.schema.inherent_dim()
    }

    pub fn cross_dim(&self) -> usize {
        self.schema.cross_dim()
    }

    fn write_block(&self, idx: &[usize], values: &[FeatureValue], out: &mut [S]) -> Result<()> {
        if values.len() != idx.len() {
            return Err(Error::shape("feature block", idx.len(), values.len()));
        }
        let mut offset = 0;
        for (&ti, value) in idx.iter().zip(values) {
            let spec = &self.schema.features[ti];
            value.check(spec)?;
            let table = &self.tables[ti];
            let d = table.dim();
            let slot = &mut out[offset..offset + d];
            slot.iter_mut().for_each(|x| *x = S::zero());
            for &v in value.as_slice() {
                for (o, &e) in slot.iter_mut().zip(table.column(v as usize)) {
                    *o += e;
                }
            }
            offset += d;
        }
        Ok(())
    }

    /// Concatenated inherent embeddings of one item, written into `out` (length H).
    pub fn inherent_row(&self, values: &[FeatureValue], out: &mut [S]) -> Result<()> {
        self.write_block(&self.inherent_idx, values, out)
    }

    /// Concatenated cross embeddings of one behavior (length C).
    pub fn cross_row(&self, values: &[FeatureValue], out: &mut [S]) -> Result<()> {
        self.write_block(&self.cross_idx, values, out)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.tables.iter().map(EmbeddingTable::to_tensor).collect()
    }

    pub fn from_tensors(schema: FeatureSchema, tensors: &[NamedTensor]) -> Result<Self> {
        let tables = tensors
            .iter()
            .map(EmbeddingTable::from_tensor)
            .collect::<Result<Vec<_>>>()?;
        Self::from_tables(schema, tables)
    }
}

/// Builds `K_h` (L x H) and `K_c` (L x C) from a behavior sequence.
pub fn assemble_k<S: Real>(
    behaviors: &[BehaviorRecord],
    tables: &EmbeddingTables<S>,
) -> Result<(Matrix<S>, Matrix<S>)> {
    if behaviors.is_empty() {
        return Err(Error::invalid("cannot assemble K from an empty behavior sequence"));
    }
    let (h, c) = (tables.inherent_dim(), tables.cross_dim());
    let mut kh = Matrix::zeros(behaviors.len(), h);
    let mut kc = Matrix::zeros(behaviors.len(), c);
    for (i, b) in behaviors.iter().enumerate() {
        tables.inherent_row(&b.inherent, kh.row_mut(i))?;
        tables.cross_row(&b.cross, kc.row_mut(i))?;
    }
    Ok((kh, kc))
}

/// The target's inherent embedding `q` (length H).
pub fn embed_target<S: Real>(target: &TargetItem, tables: &EmbeddingTables<S>) -> Result<Vec<S>> {
    let mut q = vec![S::zero(); tables.inherent_dim()];
    tables.inherent_row(&target.inherent, &mut q)?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_vocab() -> StandardVocab {
        StandardVocab {
            videos: 50,
            authors: 10,
            ..StandardVocab::default()
        }
    }

    fn record(video: u32, author: u32, cat: u32) -> BehaviorRecord {
        BehaviorRecord {
            video_id: u64::from(video),
            inherent: vec![
                FeatureValue::One(video),
                FeatureValue::One(author),
                FeatureValue::One(cat),
                FeatureValue::One(2),
            ],
            cross: vec![
                FeatureValue::One(5),
                FeatureValue::One(9),
                FeatureValue::One(0),
                FeatureValue::Multi(vec![0, 3]),
                FeatureValue::One(7),
            ],
            event_time: 0.0,
        }
    }

    #[test]
    fn weekday_one_hot() {
        let spec = FeatureSpec::new("weekday", FeatureKind::Inherent, Encoding::OneHot, 7);
        let hot: Vec<f64> = encode_hot(&FeatureValue::One(0), &spec).unwrap();
        assert_eq!(hot, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn multi_hot_and_empty_set() {
        let spec = FeatureSpec::new("flags", FeatureKind::Cross, Encoding::MultiHot, 5);
        let hot: Vec<f64> = encode_hot(&FeatureValue::Multi(vec![1, 3]), &spec).unwrap();
        assert_eq!(hot, vec![0.0, 1.0, 0.0, 1.0, 0.0]);
        let empty: Vec<f64> = encode_hot(&FeatureValue::Multi(vec![]), &spec).unwrap();
        assert_eq!(empty, vec![0.0; 5]);
    }

    #[test]
    fn out_of_vocab_rejected() {
        let spec = FeatureSpec::new("weekday", FeatureKind::Inherent, Encoding::OneHot, 7);
        assert!(encode_hot::<f64>(&FeatureValue::One(7), &spec).is_err());
        assert!(encode_hot::<f64>(&FeatureValue::Multi(vec![1]), &spec).is_err());
    }

    #[test]
    fn embed_selects_and_sums_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTable::<f64>::random("a", 5, 3, 1.0, &mut rng);
        let spec = FeatureSpec::new("a", FeatureKind::Inherent, Encoding::MultiHot, 5);
        let one = embed(&encode_hot(&FeatureValue::Multi(vec![2]), &spec).unwrap(), &t).unwrap();
        assert_eq!(one, t.column(2));
        let two = embed(&encode_hot(&FeatureValue::Multi(vec![0, 1]), &spec).unwrap(), &t).unwrap();
        for d in 0..3 {
            assert_eq!(two[d], t.column(0)[d] + t.column(1)[d]);
        }
        assert!(embed(&[1.0; 4], &t).is_err());
    }

    #[test]
    fn id_features_are_64_wide() {
        let schema = FeatureSchema::standard(tiny_vocab());
        assert_eq!(schema.find("video_id").unwrap().emb_dim(), 64);
        assert_eq!(schema.find("category").unwrap().emb_dim(), 8);
        assert_eq!(schema.inherent_dim(), 144);
        assert_eq!(schema.n_cross(), 5);
        assert_eq!(schema.cross_dim(), 40);
    }

    #[test]
    fn cross_features_must_be_eight_wide() {
        let bad = vec![
            FeatureSpec::new("v", FeatureKind::Inherent, Encoding::OneHot, 3),
            FeatureSpec::new("c", FeatureKind::Cross, Encoding::OneHot, 3).with_dim(4),
        ];
        assert!(matches!(FeatureSchema::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn single_behavior_matches_direct_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tables =
            EmbeddingTables::<f64>::random(FeatureSchema::standard(tiny_vocab()), 1.0, &mut rng)
                .unwrap();
        let b = record(4, 3, 36);
        let (kh, kc) = assemble_k(std::slice::from_ref(&b), &tables).unwrap();
        assert_eq!(kh.shape(), (1, 144));
        assert_eq!(kc.shape(), (1, 40));
        let mut direct = Vec::new();
        for (spec, v) in tables.schema.inherent().zip(&b.inherent) {
            let t = tables.table(&spec.name).unwrap();
            direct.extend(embed(&encode_hot(v, spec).unwrap(), t).unwrap());
        }
        assert_eq!(kh.row(0), direct.as_slice());
        let mut direct = Vec::new();
        for (spec, v) in tables.schema.cross().zip(&b.cross) {
            let t = tables.table(&spec.name).unwrap();
            direct.extend(embed(&encode_hot(v, spec).unwrap(), t).unwrap());
        }
        assert_eq!(kc.row(0), direct.as_slice());
    }

    #[test]
    fn target_shares_the_behavior_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tables =
            EmbeddingTables::<f64>::random(FeatureSchema::standard(tiny_vocab()), 1.0, &mut rng)
                .unwrap();
        let seq = vec![record(1, 1, 1), record(7, 2, 5)];
        let (kh, _) = assemble_k(&seq, &tables).unwrap();
        let target = TargetItem {
            video_id: 7,
            inherent: seq[1].inherent.clone(),
        };
        let q = embed_target(&target, &tables).unwrap();
        assert_eq!(q.len(), kh.cols());
        assert_eq!(q.as_slice(), kh.row(1));
        let unknown = TargetItem {
            video_id: 99,
            inherent: vec![
                FeatureValue::One(99),
                FeatureValue::One(0),
                FeatureValue::One(0),
                FeatureValue::One(0),
            ],
        };
        assert!(embed_target(&unknown, &tables).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tables =
            EmbeddingTables::<f64>::random(FeatureSchema::standard(tiny_vocab()), 1.0, &mut rng)
                .unwrap();
        assert!(assemble_k(&[], &tables).is_err());
    }

    #[test]
    fn schema_round_trips_through_toml() {
        let schema = FeatureSchema::standard(tiny_vocab());
        let text = toml::to_string(&schema).unwrap();
        assert!(text.contains("kind = \"cross\""));
        assert!(text.contains("encoding = \"multi-hot\""));
        let back: FeatureSchema = toml::from_str(&text).unwrap();
        assert_eq!(back, schema);
    }

    #[test]
    fn table_snapshot_keeps_natural_orientation() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = EmbeddingTable::<f64>::from_matrix("a", &e);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.vocab(), 3);
        assert_eq!(t.column(1), &[2.0, 5.0]);
        let snap = t.to_tensor();
        assert_eq!((snap.rows, snap.cols), (2, 3));
        assert_eq!(snap.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(EmbeddingTable::<f64>::from_tensor(&snap).unwrap(), t);
    }

    proptest! {
        #[test]
        fn embed_is_linear(seed in any::<u64>(), a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = EmbeddingTable::<f64>::random("a", 6, 4, 1.0, &mut rng);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = embed(&sum, &t).unwrap();
            let ea = embed(&a, &t).unwrap();
            let eb = embed(&b, &t).unwrap();
            for d in 0..4 {
                prop_assert!((lhs[d] - (ea[d] + eb[d])).abs() < 1e-12);
            }
        }

        #[test]
        fn permuting_behaviors_permutes_rows(seed in any::<u64>(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tables = EmbeddingTables::<f64>::random(FeatureSchema::standard(tiny_vocab()), 1.0, &mut rng).unwrap();
            let seq: Vec<BehaviorRecord> = (0..6).map(|i| record(i * 3, i, i * 5)).collect();
            let mut order: Vec<usize> = (0..6).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted: Vec<BehaviorRecord> = order.iter().map(|&i| seq[i].clone()).collect();
            let (kh, kc) = assemble_k(&seq, &tables).unwrap();
            let (ph, pc) = assemble_k(&permuted, &tables).unwrap();
            prop_assert_eq!(ph, kh.select_rows(&order));
            prop_assert_eq!(pc, kc.select_rows(&order));
        }
    }
}
