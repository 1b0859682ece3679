//! Seeded synthetic world: videos with latent topics, users with sparse topic
//! mixtures, long behavior logs and click labels with a planted long-range
//! dependency.
//!
//! The label of a (user, target) pair depends on how many same-topic behaviors
//! the user has *older than* the most recent `recent_cutoff`, so a model that
//! only sees the recent tail cannot recover it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BehaviorRecord, FeatureSchema, FeatureValue, StandardVocab, TargetItem};

pub const DEFAULT_CATEGORIES: usize = 37;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSizes {
    pub duration: usize,
    pub timestamp: usize,
    pub playtime: usize,
    pub page_position: usize,
    pub interaction_flags: usize,
    pub recency: usize,
}

impl Default for BucketSizes {
    fn default() -> Self {
        Self {
            duration: 8,
            timestamp: 24,
            playtime: 10,
            page_position: 8,
            interaction_flags: 4,
            recency: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelWeights {
    pub bias: f64,
    /// Weight on the user's static mixture weight for the target topic.
    pub affinity: f64,
    /// Weight on `ln(1 + n)`, `n` = same-topic behaviors older than the recent cutoff.
    pub long_term: f64,
    /// Weight on the recency-weighted mean normalized playtime of same-topic behaviors.
    pub playtime: f64,
    pub recent_cutoff: usize,
    pub playtime_half_life_days: f64,
}

impl Default for LabelWeights {
    fn default() -> Self {
        Self {
            bias: -2.0,
            affinity: 1.0,
            long_term: 0.8,
            playtime: 1.5,
            recent_cutoff: 100,
            playtime_half_life_days: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub n_categories: usize,
    pub n_latent_topics: usize,
    pub n_authors: usize,
    pub topics_per_user: usize,
    pub mean_behaviors: usize,
    pub min_behaviors: usize,
    pub max_behaviors: usize,
    /// Log-normal spread of sequence lengths.
    pub length_sigma: f64,
    pub window_minutes: f64,
    /// 0 keeps topic frequencies stationary; 1 moves fully to the recent mixture by the end.
    pub topic_drift: f64,
    /// Share of behaviors on uniformly random topics.
    pub background_rate: f64,
    /// Probability that a video's category is random instead of its topic's.
    pub category_noise: f64,
    pub popularity_exponent: f64,
    pub buckets: BucketSizes,
    pub targets_per_user: usize,
    /// Share of targets drawn from the user's interest topics.
    pub on_interest_targets: f64,
    pub label: LabelWeights,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 2_000,
            n_videos: 20_000,
            n_categories: DEFAULT_CATEGORIES,
            n_latent_topics: 74,
            n_authors: 2_000,
            topics_per_user: 4,
            mean_behaviors: 2_000,
            min_behaviors: 200,
            max_behaviors: 10_000,
            length_sigma: 0.5,
            window_minutes: 180.0 * 1440.0,
            topic_drift: 0.5,
            background_rate: 0.15,
            category_noise: 0.3,
            popularity_exponent: 0.8,
            buckets: BucketSizes::default(),
            targets_per_user: 20,
            on_interest_targets: 0.5,
            label: LabelWeights::default(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_videos", self.n_videos),
            ("n_categories", self.n_categories),
            ("n_latent_topics", self.n_latent_topics),
            ("n_authors", self.n_authors),
            ("topics_per_user", self.topics_per_user),
            ("max_behaviors", self.max_behaviors),
            ("buckets.duration", self.buckets.duration),
            ("buckets.timestamp", self.buckets.timestamp),
            ("buckets.playtime", self.buckets.playtime),
            ("buckets.page_position", self.buckets.page_position),
            ("buckets.interaction_flags", self.buckets.interaction_flags),
            ("buckets.recency", self.buckets.recency),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        if self.min_behaviors > self.max_behaviors {
            errors.push("min_behaviors exceeds max_behaviors".into());
        }
        if self.topics_per_user > self.n_latent_topics {
            errors.push("topics_per_user exceeds n_latent_topics".into());
        }
        if self.n_authors < self.n_latent_topics {
            errors.push("n_authors must be at least n_latent_topics".into());
        }
        if self.n_videos < self.n_latent_topics {
            errors.push("n_videos must be at least n_latent_topics".into());
        }
        for (name, v) in [
            ("topic_drift", self.topic_drift),
            ("background_rate", self.background_rate),
            ("category_noise", self.category_noise),
            ("on_interest_targets", self.on_interest_targets),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.window_minutes <= 0.0 {
            errors.push("window_minutes must be positive".into());
        }
        if self.n_users.saturating_mul(self.mean_behaviors) > 10_000_000 {
            errors.push("n_users * mean_behaviors exceeds 10^7".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn vocab(&self) -> StandardVocab {
        StandardVocab {
            videos: self.n_videos,
            authors: self.n_authors,
            categories: self.n_categories,
            duration_buckets: self.buckets.duration,
            timestamp_buckets: self.buckets.timestamp,
            playtime_buckets: self.buckets.playtime,
            page_positions: self.buckets.page_position,
            interaction_flags: self.buckets.interaction_flags,
            recency_buckets: self.buckets.recency,
        }
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::standard(self.vocab())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Video {
    pub id: u32,
    pub topic: u32,
    pub author: u32,
    pub category: u32,
    pub duration: u32,
    /// 0 is the most popular video.
    pub popularity_rank: u32,
}

impl Video {
    /// Inherent values in standard-schema order.
    pub fn inherent(&self) -> Vec<FeatureValue> {
        vec![
            FeatureValue::One(self.id),
            FeatureValue::One(self.author),
            FeatureValue::One(self.category),
            FeatureValue::One(self.duration),
        ]
    }

    pub fn as_target(&self) -> TargetItem {
        TargetItem {
            video_id: u64::from(self.id),
            inherent: self.inherent(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: u32,
    /// Long-term interest mixture (topic, weight), weights summing to 1.
    pub long_term: Vec<(u32, f64)>,
    /// Mixture the user drifts towards over the window.
    pub recent: Vec<(u32, f64)>,
    /// Per-topic enjoyment in (0, 1] for every interest topic.
    pub enjoyment: Vec<(u32, f64)>,
    pub length: usize,
}

impl User {
    /// Static affinity: long-term mixture weight of `topic`.
    pub fn affinity(&self, topic: u32) -> f64 {
        self.long_term
            .iter()
            .find(|(t, _)| *t == topic)
            .map_or(0.0, |(_, w)| *w)
    }

    pub fn enjoyment(&self, topic: u32) -> Option<f64> {
        self.enjoyment.iter().find(|(t, _)| *t == topic).map(|(_, e)| *e)
    }

    pub fn is_interest(&self, topic: u32) -> bool {
        self.enjoyment(topic).is_some()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub videos: Vec<Video>,
    pub users: Vec<User>,
    topic_videos: Vec<Vec<u32>>,
    topic_samplers: Vec<WeightedIndex<f64>>,
}

const STREAM_WORLD: u64 = 1;
const STREAM_BEHAVIORS: u64 = 2;
const STREAM_TARGETS: u64 = 3;
const STREAM_LABELS: u64 = 4;

/// Independent generator for `(master seed, purpose, id)`, so per-user work can
/// run in any order and produce the same result.
pub fn sub_rng(seed: u64, purpose: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) ^ id);
    rng
}

fn mixture<R: Rng>(topics: &[u32], rng: &mut R) -> Vec<(u32, f64)> {
    let raw: Vec<f64> = topics.iter().map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    topics.iter().zip(raw).map(|(&t, w)| (t, w / total)).collect()
}

fn sample_from(mix: &[(u32, f64)], rng: &mut impl Rng) -> u32 {
    let mut u: f64 = rng.random();
    for &(t, w) in mix {
        if u < w {
            return t;
        }
        u -= w;
    }
    mix.last().expect("non-empty mixture").0
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = sub_rng(config.seed, STREAM_WORLD, 0);
    let n_topics = config.n_latent_topics;

    let mut ranks: Vec<u32> = (0..config.n_videos as u32).collect();
    rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), &mut rng);

    let mut videos = Vec::with_capacity(config.n_videos);
    for id in 0..config.n_videos as u32 {
        // every topic gets at least one video
        let topic = if (id as usize) < n_topics {
            id
        } else {
            rng.random_range(0..n_topics as u32)
        };
        let authors_per_topic = config.n_authors / n_topics;
        let author = topic + n_topics as u32 * rng.random_range(0..authors_per_topic as u32);
        let category = if rng.random_bool(config.category_noise) {
            rng.random_range(0..config.n_categories as u32)
        } else {
            topic % config.n_categories as u32
        };
        videos.push(Video {
            id,
            topic,
            author,
            category,
            duration: rng.random_range(0..config.buckets.duration as u32),
            popularity_rank: ranks[id as usize],
        });
    }

    let mut topic_videos = vec![Vec::new(); n_topics];
    for v in &videos {
        topic_videos[v.topic as usize].push(v.id);
    }
    let topic_samplers = topic_videos
        .iter()
        .map(|ids| {
            WeightedIndex::new(ids.iter().map(|&id| {
                (f64::from(videos[id as usize].popularity_rank) + 1.0).powf(-config.popularity_exponent)
            }))
            .expect("each topic has at least one video")
        })
        .collect();

    let lengths = Normal::new(
        (config.mean_behaviors.max(1) as f64).ln() - config.length_sigma.powi(2) / 2.0,
        config.length_sigma,
    )
    .map_err(|e| Error::invalid(e.to_string()))?;
    let users = (0..config.n_users as u32)
        .map(|id| {
            let mut rng = sub_rng(config.seed, STREAM_WORLD, u64::from(id) + 1);
            let long_topics =
                rand::seq::index::sample(&mut rng, n_topics, config.topics_per_user).into_vec();
            let recent_topics: Vec<usize> = long_topics
                .iter()
                .map(|&t| {
                    if rng.random_bool(0.5) {
                        t
                    } else {
                        rng.random_range(0..n_topics)
                    }
                })
                .collect();
            let long: Vec<u32> = long_topics.iter().map(|&t| t as u32).collect();
            let mut recent: Vec<u32> = recent_topics.iter().map(|&t| t as u32).collect();
            recent.sort_unstable();
            recent.dedup();
            let mut interests = long.clone();
            interests.extend(&recent);
            interests.sort_unstable();
            interests.dedup();
            let enjoyment = interests
                .iter()
                .map(|&t| (t, rng.random_range(0.2..1.0)))
                .collect();
            let length = (lengths.sample(&mut rng).exp().round() as usize)
                .clamp(config.min_behaviors, config.max_behaviors);
            User {
                id,
                long_term: mixture(&long, &mut rng),
                recent: mixture(&recent, &mut rng),
                enjoyment,
                length,
            }
        })
        .collect();

    Ok(World {
        config: config.clone(),
        videos,
        users,
        topic_videos,
        topic_samplers,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl World {
    pub fn schema(&self) -> FeatureSchema {
        self.config.schema()
    }

    pub fn topic_videos(&self, topic: u32) -> &[u32] {
        &self.topic_videos[topic as usize]
    }

    /// A popularity-weighted video of `topic`.
    pub fn sample_video(&self, topic: u32, rng: &mut impl Rng) -> u32 {
        let ids = &self.topic_videos[topic as usize];
        ids[self.topic_samplers[topic as usize].sample(rng)]
    }

    /// Normalized playtime in [0, 1] for a bucket.
    pub fn playtime_level(&self, bucket: u32) -> f64 {
        f64::from(bucket) / (self.config.buckets.playtime.max(2) - 1) as f64
    }

    fn recency_bucket(&self, age_minutes: f64) -> u32 {
        let days = age_minutes.max(0.0) / 1440.0;
        ((1.0 + days).log2().floor() as u32).min(self.config.buckets.recency as u32 - 1)
    }

    /// The user's behavior sequence, oldest first, ending at the window end.
    pub fn generate_behaviors(&self, user: &User, length: usize) -> Vec<BehaviorRecord> {
        let cfg = &self.config;
        let mut rng = sub_rng(cfg.seed, STREAM_BEHAVIORS, u64::from(user.id));
        let mut times: Vec<f64> = (0..length)
            .map(|_| rng.random_range(0.0..cfg.window_minutes))
            .collect();
        times.sort_by(f64::total_cmp);
        let playtime_noise = Normal::new(0.0, 1.2).unwrap();
        let top_bucket = cfg.buckets.playtime as f64 - 1.0;
        let mut out = Vec::with_capacity(length);
        for (i, &t) in times.iter().enumerate() {
            let progress = i as f64 / length.max(1) as f64;
            let topic = if rng.random_bool(cfg.background_rate) {
                rng.random_range(0..cfg.n_latent_topics as u32)
            } else if rng.random_bool((cfg.topic_drift * progress).clamp(0.0, 1.0)) {
                sample_from(&user.recent, &mut rng)
            } else {
                sample_from(&user.long_term, &mut rng)
            };
            let video = &self.videos[self.sample_video(topic, &mut rng) as usize];
            let level = match user.enjoyment(topic) {
                Some(e) => 0.25 + 0.7 * e,
                None => 0.15,
            };
            let playtime = (level * top_bucket + playtime_noise.sample(&mut rng))
                .round()
                .clamp(0.0, top_bucket) as u32;
            let flags: Vec<u32> = (0..cfg.buckets.interaction_flags as u32)
                .filter(|&f| {
                    let p = sigmoid(2.0 * (f64::from(playtime) - top_bucket * 0.7) / top_bucket * 4.0 - f64::from(f) * 0.5);
                    rng.random_bool(p)
                })
                .collect();
            let hour = ((t % 1440.0) / 1440.0 * cfg.buckets.timestamp as f64) as u32;
            out.push(BehaviorRecord {
                video_id: u64::from(video.id),
                inherent: video.inherent(),
                cross: vec![
                    FeatureValue::One(hour.min(cfg.buckets.timestamp as u32 - 1)),
                    FeatureValue::One(playtime),
                    FeatureValue::One(rng.random_range(0..cfg.buckets.page_position as u32)),
                    FeatureValue::Multi(flags),
                    FeatureValue::One(self.recency_bucket(cfg.window_minutes - t)),
                ],
                event_time: t,
            });
        }
        out
    }

    /// Click probability of `user` on `target` given the full history.
    pub fn click_probability(&self, user: &User, target: &Video, history: &[BehaviorRecord]) -> f64 {
        let w = &self.config.label;
        let old_end = history.len().saturating_sub(w.recent_cutoff);
        let topic_of = |b: &BehaviorRecord| self.videos[b.video_id as usize].topic;
        let long_term_count = history[..old_end]
            .iter()
            .filter(|b| topic_of(b) == target.topic)
            .count();
        let half_life = w.playtime_half_life_days * 1440.0;
        let (mut num, mut den) = (0.0, 0.0);
        for b in history.iter().filter(|b| topic_of(b) == target.topic) {
            let age = self.config.window_minutes - b.event_time;
            let weight = (-(age / half_life) * std::f64::consts::LN_2).exp();
            let FeatureValue::One(pt) = b.cross[1] else { unreachable!("playtime is one-hot") };
            num += weight * self.playtime_level(pt);
            den += weight;
        }
        let playtime = if den > 0.0 { num / den } else { 0.0 };
        sigmoid(
            w.bias
                + w.affinity * user.affinity(target.topic)
                + w.long_term * (1.0 + long_term_count as f64).ln()
                + w.playtime * playtime,
        )
    }

    /// Bernoulli draw of the click label; the draw depends only on
    /// `(seed, user, sample_index)`.
    pub fn label_click(&self, user: &User, target: &Video, history: &[BehaviorRecord], sample_index: u64) -> u8 {
        let p = self.click_probability(user, target, history);
        let mut rng = sub_rng(self.config.seed, STREAM_LABELS, (u64::from(user.id) << 20) | sample_index);
        u8::from(rng.random_bool(p))
    }

    /// Candidate targets for a user: a share from their interest topics, the rest uniform.
    pub fn sample_targets(&self, user: &User) -> Vec<u32> {
        let mut rng = sub_rng(self.config.seed, STREAM_TARGETS, u64::from(user.id));
        let interests: Vec<u32> = user.enjoyment.iter().map(|(t, _)| *t).collect();
        (0..self.config.targets_per_user)
            .map(|_| {
                if rng.random_bool(self.config.on_interest_targets) {
                    let t = interests[rng.random_range(0..interests.len())];
                    self.sample_video(t, &mut rng)
                } else {
                    rng.random_range(0..self.config.n_videos as u32)
                }
            })
            .collect()
    }

    /// Flat context vector for a request.
    pub fn context(&self, history_len: usize, target: &Video) -> Vec<f64> {
        vec![
            (1.0 + history_len as f64).ln() / (1.0 + self.config.max_behaviors as f64).ln(),
            (1.0 + f64::from(target.popularity_rank)).ln() / (1.0 + self.config.n_videos as f64).ln(),
        ]
    }

    pub fn build_log(&self) -> SyntheticLog {
        let mut users = Vec::with_capacity(self.users.len());
        let mut samples = Vec::new();
        for user in &self.users {
            let behaviors = self.generate_behaviors(user, user.length);
            for (i, vid) in self.sample_targets(user).into_iter().enumerate() {
                let video = &self.videos[vid as usize];
                samples.push(LabeledSample {
                    user_id: user.id,
                    target: video.as_target(),
                    context: self.context(behaviors.len(), video),
                    label: self.label_click(user, video, &behaviors, i as u64),
                    request_time: self.config.window_minutes,
                });
            }
            users.push(UserLog {
                user_id: user.id,
                behaviors,
            });
        }
        SyntheticLog { users, samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLog {
    pub user_id: u32,
    pub behaviors: Vec<BehaviorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub user_id: u32,
    pub target: TargetItem,
    pub context: Vec<f64>,
    pub label: u8,
    pub request_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticLog {
    pub users: Vec<UserLog>,
    pub samples: Vec<LabeledSample>,
}

impl SyntheticLog {
    pub fn user(&self, id: u32) -> Option<&UserLog> {
        self.users.iter().find(|u| u.user_id == id)
    }
}

/// One JSON-Lines row: `{"kind":"behavior","user_id":..,"video_id":..,"inherent":[..],"cross":[..],"event_time":..}`
/// or `{"kind":"sample","user_id":..,"target":{..},"context":[..],"label":0|1,"request_time":..}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Behavior {
        user_id: u32,
        #[serde(flatten)]
        record: BehaviorRecord,
    },
    Sample(LabeledSample),
}

pub fn write_log(log: &SyntheticLog, out: &mut impl Write) -> std::io::Result<()> {
    for u in &log.users {
        for b in &u.behaviors {
            let line = LogLine::Behavior {
                user_id: u.user_id,
                record: b.clone(),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    for s in &log.samples {
        serde_json::to_writer(&mut *out, &LogLine::Sample(s.clone()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log(input: impl BufRead) -> Result<SyntheticLog> {
    let mut log = SyntheticLog::default();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match parsed {
            LogLine::Behavior { user_id, record } => {
                if let Some(u) = log.users.last_mut().filter(|u| u.user_id == user_id) {
                    u.behaviors.push(record);
                } else if log.users.iter().any(|u| u.user_id == user_id) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("behaviors of user {user_id} are not contiguous"),
                    });
                } else {
                    log.users.push(UserLog {
                        user_id,
                        behaviors: vec![record],
                    });
                }
            }
            LogLine::Sample(s) => {
                if s.label > 1 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("label {} is not binary", s.label),
                    });
                }
                log.samples.push(s);
            }
        }
    }
    Ok(log)
}

pub fn export_log(log: &SyntheticLog, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log(log, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn import_log(path: &Path) -> Result<SyntheticLog> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_log(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_users: 20,
            n_videos: 600,
            n_latent_topics: 12,
            n_authors: 48,
            n_categories: 37,
            mean_behaviors: 300,
            min_behaviors: 150,
            max_behaviors: 600,
            targets_per_user: 10,
            seed: 7,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a.videos, b.videos);
        assert_eq!(a.users, b.users);
        assert_eq!(a.build_log(), b.build_log());
        let c = generate_world(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.videos, c.videos);
    }

    #[test]
    fn category_vocab_defaults_to_37() {
        let w = generate_world(&small()).unwrap();
        assert_eq!(w.schema().find("category").unwrap().vocab, 37);
        assert!(w.videos.iter().all(|v| v.category < 37));
        assert_eq!(WorldConfig::default().n_categories, 37);
    }

    #[test]
    fn stationary_topic_frequencies_match_mixture() {
        let cfg = WorldConfig {
            topic_drift: 0.0,
            background_rate: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        let user = &w.users[3];
        let n = 100_000;
        let seq = w.generate_behaviors(user, n);
        for &(topic, weight) in &user.long_term {
            let freq = seq
                .iter()
                .filter(|b| w.videos[b.video_id as usize].topic == topic)
                .count() as f64
                / n as f64;
            let se = (weight * (1.0 - weight) / n as f64).sqrt();
            assert!((freq - weight).abs() < 4.0 * se, "topic {topic}: {freq} vs {weight}");
        }
    }

    #[test]
    fn zero_length_is_empty() {
        let w = generate_world(&small()).unwrap();
        assert!(w.generate_behaviors(&w.users[0], 0).is_empty());
    }

    #[test]
    fn timestamps_are_ordered_and_features_in_vocab() {
        let w = generate_world(&small()).unwrap();
        let schema = w.schema();
        let seq = w.generate_behaviors(&w.users[1], 500);
        assert!(seq.windows(2).all(|p| p[0].event_time <= p[1].event_time));
        let tables = crate::features::EmbeddingTables::<f64>::zeros(schema).unwrap();
        crate::features::assemble_k(&seq, &tables).unwrap();
    }

    #[test]
    fn on_interest_playtime_is_higher() {
        let w = generate_world(&small()).unwrap();
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for user in &w.users {
            for b in w.generate_behaviors(user, 500) {
                let FeatureValue::One(pt) = b.cross[1] else { unreachable!() };
                let topic = w.videos[b.video_id as usize].topic;
                if user.is_interest(topic) { on.push(f64::from(pt)) } else { off.push(f64::from(pt)) }
            }
        }
        assert!(on.len() + off.len() >= 10_000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&on) > mean(&off) + 1.0, "{} vs {}", mean(&on), mean(&off));
    }

    #[test]
    fn ablated_label_depends_only_on_affinity() {
        let mut cfg = small();
        cfg.label.long_term = 0.0;
        cfg.label.playtime = 0.0;
        let w = generate_world(&cfg).unwrap();
        let user = &w.users[0];
        let target = &w.videos[5];
        let a = w.generate_behaviors(user, 300);
        let b = w.generate_behaviors(&w.users[1], 400);
        let p = w.click_probability(user, target, &a);
        assert_eq!(p, w.click_probability(user, target, &b));
        assert_eq!(p, sigmoid(cfg.label.bias + cfg.label.affinity * user.affinity(target.topic)));
    }

    #[test]
    fn empirical_click_rate_matches_probability() {
        let w = generate_world(&small()).unwrap();
        let user = &w.users[2];
        let hist = w.generate_behaviors(user, 300);
        let target = &w.videos[w.topic_videos(user.long_term[0].0)[0] as usize];
        let p = w.click_probability(user, target, &hist);
        let n = 100_000u64;
        let clicks: u64 = (0..n).map(|i| u64::from(w.label_click(user, target, &hist, i))).sum();
        let rate = clicks as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < 2.0 * se + 1e-12, "{rate} vs {p}");
    }

    #[test]
    fn identical_inputs_identical_labels() {
        let w = generate_world(&small()).unwrap();
        let user = &w.users[4];
        let hist = w.generate_behaviors(user, 200);
        let t = &w.videos[9];
        let a: Vec<u8> = (0..50).map(|i| w.label_click(user, t, &hist, i)).collect();
        let b: Vec<u8> = (0..50).map(|i| w.label_click(user, t, &hist.clone(), i)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_round_trip_and_stable_reexport() {
        let cfg = WorldConfig {
            n_users: 4,
            mean_behaviors: 240,
            min_behaviors: 240,
            max_behaviors: 240,
            ..small()
        };
        let log = generate_world(&cfg).unwrap().build_log();
        let rows = log.users.iter().map(|u| u.behaviors.len()).sum::<usize>() + log.samples.len();
        assert!(rows >= 1000);
        let mut first = Vec::new();
        write_log(&log, &mut first).unwrap();
        let back = read_log(first.as_slice()).unwrap();
        assert_eq!(back, log);
        let mut second = Vec::new();
        write_log(&back, &mut second).unwrap();
        assert_eq!(first, second);
        let text = String::from_utf8(first).unwrap();
        let line = text.lines().next().unwrap();
        assert!(line.starts_with("{\"kind\":\"behavior\",\"user_id\":0,\"video_id\":"));
    }

    #[test]
    fn malformed_line_is_reported_with_its_number() {
        let log = generate_world(&small()).unwrap().build_log();
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let mut text: Vec<String> = String::from_utf8(buf).unwrap().lines().map(String::from).collect();
        text[2] = "{\"kind\":\"behavior\",".into();
        let err = read_log(text.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn config_validation_names_problems() {
        let bad = WorldConfig {
            n_users: 0,
            topic_drift: 1.5,
            ..small()
        };
        let Err(Error::Config(errs)) = bad.validate() else { panic!() };
        assert!(errs.iter().any(|e| e.contains("n_users")));
        assert!(errs.iter().any(|e| e.contains("topic_drift")));
    }
}
