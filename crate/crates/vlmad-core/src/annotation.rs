//! Teacher prompts, reply parsing, and the annotation pipeline.
//!
//! Two prompt families are used per frame: P1 elicits freeform text about
//! the current action, future action, and reasoning; P2 elicits one label
//! per structured action family. The two requests are independent.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::projection::FrontViewImage;

pub const C1: &str = "This is the front-view image of the ego vehicle. The red line indicates the future trajectory, no line suggests stopping or slowing down. When explaining the reasoning, please focus on the camera image and the surrounding context rather than referencing the plotted trajectory.";
pub const Q1_1: &str = "Please describe the ego vehicle's current actions.";
pub const Q1_2: &str = "Please predict the ego vehicle's future actions.";
pub const Q1_3: &str = "Please explain the reasoning of current and future action.";

pub const C2: &str = "This is the front-view image of the ego vehicle. The red line indicates the future trajectory, no line suggests stopping or slowing down.";
pub const Q2_1: &str = "Please describe the ego vehicle's action from the control action list: {go straight, move slowly, stop, reverse}.";
pub const Q2_2: &str = "Please describe the ego vehicle's action from the turn action list: {turn left, turn right, turn around, none}.";
pub const Q2_3: &str = "Please describe the ego vehicle's action from the lane action list: {change lane to the left, change lane to the right, merge into the left lane, merge into the right lane, none}.";

/// The two prompt families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptFamily {
    P1,
    P2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub context: &'static str,
    pub questions: [&'static str; 3],
}

impl PromptTemplate {
    /// Context line followed by the three question lines.
    pub fn render(&self) -> String {
        format!(
            "{}\n{}\n{}\n{}",
            self.context, self.questions[0], self.questions[1], self.questions[2]
        )
    }
}

pub fn build_prompt(family: PromptFamily) -> PromptTemplate {
    match family {
        PromptFamily::P1 => PromptTemplate {
            context: C1,
            questions: [Q1_1, Q1_2, Q1_3],
        },
        PromptFamily::P2 => PromptTemplate {
            context: C2,
            questions: [Q2_1, Q2_2, Q2_3],
        },
    }
}

/// The three freeform answers to P1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeformAnnotation {
    pub current_action: String,
    pub future_action: String,
    pub reasoning: String,
}

/// Structured action families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionFamily {
    Control,
    Turn,
    Lane,
}

impl ActionFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ActionFamily::Control => "control",
            ActionFamily::Turn => "turn",
            ActionFamily::Lane => "lane",
        }
    }
}

/// Fixed label sets plus the documented synonym merges.
#[derive(Debug, Clone)]
pub struct ActionVocabulary {
    pub control: Vec<&'static str>,
    pub turn: Vec<&'static str>,
    pub lane: Vec<&'static str>,
    pub synonym_map: BTreeMap<&'static str, &'static str>,
}

impl Default for ActionVocabulary {
    fn default() -> Self {
        let mut synonym_map = BTreeMap::new();
        synonym_map.insert("turn slightly left", "turn left");
        synonym_map.insert("turn slightly right", "turn right");
        synonym_map.insert("shift slightly to the left", "change lane to the left");
        synonym_map.insert("shift slightly to the right", "change lane to the right");
        Self {
            control: vec!["go straight", "move slowly", "stop", "reverse"],
            turn: vec!["turn left", "turn right", "turn around", "none"],
            lane: vec![
                "change lane to the left",
                "change lane to the right",
                "merge into the left lane",
                "merge into the right lane",
                "none",
            ],
            synonym_map,
        }
    }
}

impl ActionVocabulary {
    pub fn labels(&self, family: ActionFamily) -> &[&'static str] {
        match family {
            ActionFamily::Control => &self.control,
            ActionFamily::Turn => &self.turn,
            ActionFamily::Lane => &self.lane,
        }
    }

    /// Canonicalize a phrase for one family: exact label match, then the
    /// documented synonym merges, case-insensitive. Anything else is
    /// out-of-vocabulary.
    pub fn canonicalize(&self, family: ActionFamily, phrase: &str) -> Result<String> {
        let p = phrase.trim().trim_end_matches('.').to_lowercase();
        for label in self.labels(family) {
            if p == *label {
                return Ok((*label).to_string());
            }
        }
        if let Some(canon) = self.synonym_map.get(p.as_str()) {
            if self.labels(family).contains(canon) {
                return Ok((*canon).to_string());
            }
        }
        // a reply sentence that contains exactly one label counts as a match
        let contained: Vec<&&str> = self
            .labels(family)
            .iter()
            .filter(|l| **l != "none" && p.contains(**l))
            .collect();
        if contained.len() == 1 {
            return Ok((*contained[0]).to_string());
        }
        Err(Error::OutOfVocabulary {
            family: family.name().to_string(),
            phrase: phrase.trim().to_string(),
        })
    }
}

/// Canonical labels, one per family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredActionAnnotation {
    pub control_action: String,
    pub turn_action: String,
    pub lane_action: String,
}

/// One frame's full annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub freeform: FreeformAnnotation,
    pub actions: StructuredActionAnnotation,
    pub teacher_id: String,
    pub raw_p1: String,
    pub raw_p2: String,
    pub created_at: String,
}

/// Split a reply into the three answer sections.
///
/// Strategy: numbered sections first, labeled headers second, paragraph
/// split last.
pub fn split_sections(reply: &str) -> Result<[String; 3]> {
    if reply.trim().is_empty() {
        return Err(Error::Parse("empty reply".into()));
    }
    if let Some(sections) = split_numbered(reply) {
        return Ok(sections);
    }
    if let Some(sections) = split_headers(reply) {
        return Ok(sections);
    }
    let paras: Vec<&str> = reply
        .split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    if paras.len() == 3 {
        return Ok([
            paras[0].to_string(),
            paras[1].to_string(),
            paras[2].to_string(),
        ]);
    }
    Err(Error::Parse(format!(
        "could not recover three answer sections from reply: {:?}",
        truncate(reply, 120)
    )))
}

fn split_numbered(reply: &str) -> Option<[String; 3]> {
    let mut sections: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for line in reply.lines() {
        let trimmed = line.trim();
        let is_marker = (1..=3).any(|n| {
            trimmed.starts_with(&format!("{n}.")) || trimmed.starts_with(&format!("{n})"))
        });
        if is_marker && sections.len() + current.iter().len() < 3 {
            if let Some(c) = current.take() {
                sections.push(c);
            }
            current = Some(trimmed[2..].trim().to_string());
        } else if let Some(c) = &mut current {
            if !trimmed.is_empty() {
                c.push(' ');
                c.push_str(trimmed);
            }
        }
    }
    if let Some(c) = current {
        sections.push(c);
    }
    if sections.len() == 3 && sections.iter().all(|s| !s.is_empty()) {
        Some([sections.remove(0), sections.remove(0), sections.remove(0)])
    } else {
        None
    }
}

fn split_headers(reply: &str) -> Option<[String; 3]> {
    let headers = [
        ["current action:", "current actions:"],
        ["future action:", "future actions:"],
        ["reasoning:", "explanation:"],
    ];
    let lower = reply.to_lowercase();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for hs in &headers {
        let hit = hs.iter().filter_map(|h| lower.find(h).map(|i| (i, h.len()))).min()?;
        spans.push(hit);
    }
    if !(spans[0].0 < spans[1].0 && spans[1].0 < spans[2].0) {
        return None;
    }
    let mut out = Vec::new();
    for i in 0..3 {
        let start = spans[i].0 + spans[i].1;
        let end = if i < 2 { spans[i + 1].0 } else { reply.len() };
        out.push(reply[start..end].trim().to_string());
    }
    if out.iter().any(|s| s.is_empty()) {
        return None;
    }
    Some([out.remove(0), out.remove(0), out.remove(0)])
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Parse a P1 reply into the freeform triple.
pub fn parse_freeform(reply: &str) -> Result<FreeformAnnotation> {
    let [c, f, r] = split_sections(reply)?;
    Ok(FreeformAnnotation {
        current_action: c,
        future_action: f,
        reasoning: r,
    })
}

/// Parse a P2 reply into canonical action labels.
pub fn parse_actions(reply: &str, vocab: &ActionVocabulary) -> Result<StructuredActionAnnotation> {
    let [c, t, l] = split_sections(reply)?;
    Ok(StructuredActionAnnotation {
        control_action: vocab.canonicalize(ActionFamily::Control, &c)?,
        turn_action: vocab.canonicalize(ActionFamily::Turn, &t)?,
        lane_action: vocab.canonicalize(ActionFamily::Lane, &l)?,
    })
}

/// Teacher client contract: one rendered prompt in, one reply string out.
pub trait VlmClient: Send + Sync {
    fn query(
        &self,
        sample_id: &str,
        image: &FrontViewImage,
        family: PromptFamily,
        prompt: &PromptTemplate,
    ) -> Result<String>;

    fn teacher_id(&self) -> String;

    /// Deterministic clients let the pipeline emit reproducible records
    /// (fixed `created_at`).
    fn deterministic(&self) -> bool {
        false
    }
}

/// Deterministic mock teacher: the reply is a fixed function of a hash of
/// the image bytes and the rendered prompt.
pub struct MockClient;

const MOCK_CURRENT: [&str; 4] = [
    "The ego vehicle is driving forward at a steady speed.",
    "The ego vehicle is slowing down while approaching the intersection.",
    "The ego vehicle is keeping its lane behind another car.",
    "The ego vehicle is stopped at a red light.",
];
const MOCK_FUTURE: [&str; 4] = [
    "The ego vehicle will continue straight along the road.",
    "The ego vehicle will come to a stop at the crossing.",
    "The ego vehicle will turn at the upcoming junction.",
    "The ego vehicle will keep following the vehicle ahead.",
];
const MOCK_REASON: [&str; 4] = [
    "The road ahead is clear and no obstacles require a change of course.",
    "A traffic light ahead requires the vehicle to yield before proceeding.",
    "The lane markings and surrounding traffic indicate the planned maneuver is safe.",
    "The vehicle ahead constrains the achievable speed, so a cautious pace is kept.",
];

impl VlmClient for MockClient {
    fn query(
        &self,
        _sample_id: &str,
        image: &FrontViewImage,
        family: PromptFamily,
        prompt: &PromptTemplate,
    ) -> Result<String> {
        let mut h = fnv1a(prompt.render().as_bytes());
        h = h
            .wrapping_mul(0x100000001b3)
            .wrapping_add(fnv1a(&image.pixels));
        // avalanche before the modulus; FNV's low bits alone mix poorly
        let pick = |salt: u64, n: usize| {
            let mut x = h ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
            x ^= x >> 33;
            x = x.wrapping_mul(0xff51afd7ed558ccd);
            x ^= x >> 33;
            (x % n as u64) as usize
        };
        match family {
            PromptFamily::P1 => Ok(format!(
                "1. {}\n2. {}\n3. {}",
                MOCK_CURRENT[pick(1, 4)],
                MOCK_FUTURE[pick(2, 4)],
                MOCK_REASON[pick(3, 4)]
            )),
            PromptFamily::P2 => {
                let vocab = ActionVocabulary::default();
                Ok(format!(
                    "1. {}\n2. {}\n3. {}",
                    vocab.control[pick(4, vocab.control.len())],
                    vocab.turn[pick(5, vocab.turn.len())],
                    vocab.lane[pick(6, vocab.lane.len())]
                ))
            }
        }
    }

    fn teacher_id(&self) -> String {
        "mock".into()
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Replay client over a previously persisted store: returns the cached raw
/// replies by sample id.
pub struct ReplayClient {
    records: BTreeMap<String, AnnotationRecord>,
}

impl ReplayClient {
    pub fn new(records: impl IntoIterator<Item = AnnotationRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.sample_id.clone(), r)).collect(),
        }
    }
}

impl VlmClient for ReplayClient {
    fn query(
        &self,
        sample_id: &str,
        _image: &FrontViewImage,
        family: PromptFamily,
        _prompt: &PromptTemplate,
    ) -> Result<String> {
        let rec = self.records.get(sample_id).ok_or_else(|| Error::Annotation {
            sample_id: sample_id.to_string(),
            message: "no cached record to replay".into(),
        })?;
        Ok(match family {
            PromptFamily::P1 => rec.raw_p1.clone(),
            PromptFamily::P2 => rec.raw_p2.clone(),
        })
    }

    fn teacher_id(&self) -> String {
        self.records
            .values()
            .next()
            .map(|r| r.teacher_id.clone())
            .unwrap_or_else(|| "replay".into())
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Retry policy for transport failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 250,
        }
    }
}

fn query_with_retry(
    client: &dyn VlmClient,
    sample_id: &str,
    image: &FrontViewImage,
    family: PromptFamily,
    prompt: &PromptTemplate,
    retry: &RetryPolicy,
) -> Result<String> {
    let mut backoff = retry.initial_backoff_ms;
    let mut last_err = None;
    for attempt in 0..retry.max_attempts {
        match client.query(sample_id, image, family, prompt) {
            Ok(reply) => return Ok(reply),
            Err(Error::Client(msg)) => {
                last_err = Some(msg);
                if attempt + 1 < retry.max_attempts {
                    std::thread::sleep(std::time::Duration::from_millis(backoff));
                    backoff *= 2;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Annotation {
        sample_id: sample_id.to_string(),
        message: format!(
            "transport failed after {} attempts: {}",
            retry.max_attempts,
            last_err.unwrap_or_default()
        ),
    })
}

/// Query both prompt families for one frame and assemble a full record.
/// The two requests are independent; the P1 reply never feeds into P2.
pub fn annotate(
    sample_id: &str,
    image: &FrontViewImage,
    client: &dyn VlmClient,
    vocab: &ActionVocabulary,
    retry: &RetryPolicy,
) -> Result<AnnotationRecord> {
    let p1 = build_prompt(PromptFamily::P1);
    let p2 = build_prompt(PromptFamily::P2);
    let raw_p1 = query_with_retry(client, sample_id, image, PromptFamily::P1, &p1, retry)?;
    let raw_p2 = query_with_retry(client, sample_id, image, PromptFamily::P2, &p2, retry)?;
    let freeform = parse_freeform(&raw_p1)?;
    let actions = parse_actions(&raw_p2, vocab)?;
    let created_at = if client.deterministic() {
        "1970-01-01T00:00:00Z".to_string()
    } else {
        now_rfc3339()
    };
    Ok(AnnotationRecord {
        sample_id: sample_id.to_string(),
        freeform,
        actions,
        teacher_id: client.teacher_id(),
        raw_p1,
        raw_p2,
        created_at,
    })
}

fn now_rfc3339() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // days since epoch -> civil date (no external time dependency needed)
    let days = secs / 86_400;
    let rem = secs % 86_400;
    let (y, m, d) = civil_from_days(days as i64);
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

#[cfg(feature = "live-client")]
pub mod live {
    //! Minimal live HTTP teacher. Endpoint and credential come from the
    //! environment (`VLMAD_ENDPOINT`, `VLMAD_API_KEY`); the credential is
    //! never logged. Decode parameters pass through opaquely.

    use super::*;
    use serde_json::json;

    pub struct LiveClient {
        endpoint: String,
        api_key: String,
        model: String,
        /// Opaque decode parameters merged into the request body.
        pub decode_params: serde_json::Value,
        http: reqwest::blocking::Client,
    }

    impl LiveClient {
        pub fn from_env(model: &str) -> Result<Self> {
            let endpoint = std::env::var("VLMAD_ENDPOINT")
                .map_err(|_| Error::Config("VLMAD_ENDPOINT not set".into()))?;
            let api_key = std::env::var("VLMAD_API_KEY")
                .map_err(|_| Error::Config("VLMAD_API_KEY not set".into()))?;
            Ok(Self {
                endpoint,
                api_key,
                model: model.to_string(),
                decode_params: json!({}),
                http: reqwest::blocking::Client::new(),
            })
        }
    }

    impl VlmClient for LiveClient {
        fn query(
            &self,
            _sample_id: &str,
            image: &FrontViewImage,
            _family: PromptFamily,
            prompt: &PromptTemplate,
        ) -> Result<String> {
            let png = encode_png(image)?;
            let b64 = base64_encode(&png);
            let mut body = json!({
                "model": self.model,
                "messages": [{
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt.render()},
                        {"type": "image_url",
                         "image_url": {"url": format!("data:image/png;base64,{b64}")}}
                    ]
                }]
            });
            if let (Some(obj), Some(extra)) =
                (body.as_object_mut(), self.decode_params.as_object())
            {
                for (k, v) in extra {
                    obj.insert(k.clone(), v.clone());
                }
            }
            let resp = self
                .http
                .post(&self.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .map_err(|e| Error::Client(format!("request failed: {e}")))?;
            let status = resp.status();
            let payload: serde_json::Value = resp
                .json()
                .map_err(|e| Error::Client(format!("bad response body: {e}")))?;
            if !status.is_success() {
                return Err(Error::Client(format!("HTTP {status}")));
            }
            payload["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Client("missing content in response".into()))
        }

        fn teacher_id(&self) -> String {
            self.model.clone()
        }
    }

    fn encode_png(image: &FrontViewImage) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(image.width, image.height, image.pixels.clone())
                .ok_or_else(|| Error::Input("invalid image buffer".into()))?;
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Input(format!("png encode failed: {e}")))?;
        Ok(out.into_inner())
    }

    fn base64_encode(data: &[u8]) -> String {
        const TABLE: &[u8; 64] =
            b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
        let mut out = String::with_capacity((data.len() + 2) / 3 * 4);
        for chunk in data.chunks(3) {
            let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
            let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
            out.push(TABLE[(n >> 18) as usize & 63] as char);
            out.push(TABLE[(n >> 12) as usize & 63] as char);
            out.push(if chunk.len() > 1 { TABLE[(n >> 6) as usize & 63] as char } else { '=' });
            out.push(if chunk.len() > 2 { TABLE[n as usize & 63] as char } else { '=' });
        }
        out
    }
}
