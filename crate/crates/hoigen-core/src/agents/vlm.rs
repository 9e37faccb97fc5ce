//! VLM client contract: requests with image attachments and a few-shot
//! exemplar block, deterministic mocking, disk caching and rate limiting.

use crate::error::{Error, Result};
use crate::imaging::{sha256_hex, PixelImage};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// One image attachment: a label plus deterministic PNG bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmImage {
    pub label: String,
    pub png: Vec<u8>,
}

impl VlmImage {
    pub fn from_pixels(label: &str, image: &PixelImage) -> Result<Self> {
        Ok(Self {
            label: label.to_string(),
            png: image.encode_png()?,
        })
    }
}

pub const EXEMPLAR_COUNT: usize = 3;

/// An agent request. Carries at most `max_images` attachments (k previews
/// plus the selected image) and exactly three few-shot exemplars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmRequest {
    pub instruction: String,
    pub images: Vec<VlmImage>,
    pub exemplars: Vec<String>,
}

impl VlmRequest {
    pub fn new(
        instruction: String,
        images: Vec<VlmImage>,
        exemplars: Vec<String>,
        max_images: usize,
    ) -> Result<Self> {
        if exemplars.len() != EXEMPLAR_COUNT {
            return Err(Error::VlmUnavailable(format!(
                "request needs exactly {EXEMPLAR_COUNT} exemplars, got {}",
                exemplars.len()
            )));
        }
        if images.len() > max_images {
            return Err(Error::VlmUnavailable(format!(
                "request carries {} images, limit is {max_images}",
                images.len()
            )));
        }
        Ok(Self {
            instruction,
            images,
            exemplars,
        })
    }

    /// Content hash over instruction, exemplars and image bytes; the mock
    /// lookup and cache key.
    pub fn content_hash(&self) -> String {
        let mut payload = Vec::new();
        payload.extend_from_slice(self.instruction.as_bytes());
        for ex in &self.exemplars {
            payload.push(0x1e);
            payload.extend_from_slice(ex.as_bytes());
        }
        for img in &self.images {
            payload.push(0x1f);
            payload.extend_from_slice(img.label.as_bytes());
            payload.push(b':');
            payload.extend_from_slice(&img.png);
        }
        sha256_hex(&payload)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmResponse {
    pub text: String,
}

/// A visual-language-model endpoint. Implementations must be safe to share
/// across worker threads.
pub trait VlmClient: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse>;
}

/// Deterministic mock: canned replies by request hash, then rule-based
/// defaults keyed on the request kind marker embedded in the instruction.
pub struct MockVlm {
    canned: BTreeMap<String, String>,
    pose_reply: String,
    layout_reply: Option<String>,
}

/// Marker lines the agent builders put at the top of each instruction so
/// the mock (and transcript readers) can tell request kinds apart.
pub const POSE_TASK_MARKER: &str = "task: pose-selection";
pub const LAYOUT_TASK_MARKER: &str = "task: layout-suggestion";

impl MockVlm {
    pub fn new() -> Self {
        Self {
            canned: BTreeMap::new(),
            pose_reply: "Image 1".to_string(),
            layout_reply: None,
        }
    }

    /// Fixed replies for the two agent kinds.
    pub fn with_replies(pose_reply: Option<String>, layout_reply: Option<String>) -> Self {
        Self {
            canned: BTreeMap::new(),
            pose_reply: pose_reply.unwrap_or_else(|| "Image 1".to_string()),
            layout_reply,
        }
    }

    /// Map a specific request hash to a reply (strongest precedence).
    pub fn can(&mut self, request_hash: &str, reply: &str) {
        self.canned.insert(request_hash.to_string(), reply.to_string());
    }

    /// Default layout behavior: echo the extracted box found in the request
    /// body, which drives the no-changes path.
    fn echo_extracted_box(request: &VlmRequest) -> Option<String> {
        for line in request.instruction.lines() {
            if let Some(rest) = line.strip_prefix("extracted object box: ") {
                return Some(format!("proposed box: {rest}"));
            }
        }
        None
    }
}

impl Default for MockVlm {
    fn default() -> Self {
        Self::new()
    }
}

impl VlmClient for MockVlm {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse> {
        if let Some(reply) = self.canned.get(&request.content_hash()) {
            return Ok(VlmResponse {
                text: reply.clone(),
            });
        }
        let text = if request.instruction.starts_with(POSE_TASK_MARKER) {
            self.pose_reply.clone()
        } else if request.instruction.starts_with(LAYOUT_TASK_MARKER) {
            match &self.layout_reply {
                Some(r) => r.clone(),
                None => Self::echo_extracted_box(request).ok_or_else(|| {
                    Error::VlmUnavailable("mock cannot infer a layout reply".into())
                })?,
            }
        } else {
            return Err(Error::VlmUnavailable(format!(
                "mock has no reply for request {}",
                request.content_hash()
            )));
        };
        Ok(VlmResponse { text })
    }
}

/// Serializes calls through a minimum-interval rate limit and caches
/// responses on disk keyed by request hash. Writes go through a temp file
/// plus rename so concurrent workers never observe partial entries.
pub struct CachingVlm<C: VlmClient> {
    inner: C,
    cache_dir: Option<PathBuf>,
    min_interval: Duration,
    last_call: Mutex<Option<Instant>>,
}

impl<C: VlmClient> CachingVlm<C> {
    pub fn new(inner: C, cache_dir: Option<PathBuf>, min_interval: Duration) -> Self {
        Self {
            inner,
            cache_dir,
            min_interval,
            last_call: Mutex::new(None),
        }
    }

    fn cache_path(&self, hash: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{hash}.json")))
    }

    fn throttle(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_call.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl<C: VlmClient> VlmClient for CachingVlm<C> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse> {
        let hash = request.content_hash();
        if let Some(path) = self.cache_path(&hash) {
            if let Ok(text) = std::fs::read_to_string(&path) {
                let cached: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::VlmUnavailable(format!("corrupt cache entry: {e}")))?;
                if let Some(reply) = cached.get("response").and_then(|v| v.as_str()) {
                    return Ok(VlmResponse {
                        text: reply.to_string(),
                    });
                }
            }
        }
        self.throttle();
        let response = self.inner.complete(request)?;
        if let Some(path) = self.cache_path(&hash) {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let entry = serde_json::json!({ "response": response.text });
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_vec(&entry).expect("json"))?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(response)
    }
}

/// Instantiate a VLM client by config key. The remote provider is a
/// deployment concern; this build defines its selection and credential
/// sourcing but links no HTTP transport.
pub fn create(
    kind: &str,
    mock_pose_reply: Option<String>,
    mock_layout_reply: Option<String>,
    cache_dir: Option<PathBuf>,
    min_interval: Duration,
) -> Result<Box<dyn VlmClient>> {
    match kind {
        "mock" => Ok(Box::new(CachingVlm::new(
            MockVlm::with_replies(mock_pose_reply, mock_layout_reply),
            cache_dir,
            min_interval,
        ))),
        "remote" => {
            let endpoint = std::env::var("HOIGEN_VLM_ENDPOINT").map_err(|_| {
                Error::VlmUnavailable(
                    "remote VLM needs HOIGEN_VLM_ENDPOINT and HOIGEN_VLM_API_KEY; \
                     no HTTP transport is linked into this build"
                        .into(),
                )
            })?;
            let _key = std::env::var("HOIGEN_VLM_API_KEY").map_err(|_| {
                Error::VlmUnavailable("remote VLM needs HOIGEN_VLM_API_KEY set".into())
            })?;
            Err(Error::VlmUnavailable(format!(
                "remote VLM transport for {endpoint} is not linked into this build; \
                 implement VlmClient against your provider and register it here"
            )))
        }
        other => Err(Error::InvalidConfig(format!("unknown vlm {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(instruction: &str) -> VlmRequest {
        VlmRequest::new(
            instruction.to_string(),
            vec![],
            vec!["a".into(), "b".into(), "c".into()],
            6,
        )
        .unwrap()
    }

    #[test]
    fn exemplar_count_is_enforced() {
        assert!(VlmRequest::new("x".into(), vec![], vec!["a".into()], 6).is_err());
    }

    #[test]
    fn image_budget_is_enforced() {
        let img = VlmImage {
            label: "i".into(),
            png: vec![1, 2, 3],
        };
        let r = VlmRequest::new(
            "x".into(),
            vec![img.clone(), img.clone()],
            vec!["a".into(), "b".into(), "c".into()],
            1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let a = request("task: pose-selection\npick one");
        let b = request("task: pose-selection\npick one");
        let c = request("task: pose-selection\npick two");
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn mock_dispatches_by_task_marker() {
        let mock = MockVlm::with_replies(Some("Image 3".into()), Some("box [0,0,1,1]".into()));
        let pose = mock.complete(&request("task: pose-selection\n...")).unwrap();
        assert_eq!(pose.text, "Image 3");
        let layout = mock
            .complete(&request("task: layout-suggestion\n..."))
            .unwrap();
        assert_eq!(layout.text, "box [0,0,1,1]");
    }

    #[test]
    fn mock_echoes_extracted_box_by_default() {
        let mock = MockVlm::new();
        let r = request(
            "task: layout-suggestion\nextracted object box: [0.10, 0.50, 0.40, 0.90]\n",
        );
        assert_eq!(
            mock.complete(&r).unwrap().text,
            "proposed box: [0.10, 0.50, 0.40, 0.90]"
        );
    }

    #[test]
    fn canned_reply_wins() {
        let mut mock = MockVlm::new();
        let r = request("task: pose-selection\nchoose");
        mock.can(&r.content_hash(), "picture two");
        assert_eq!(mock.complete(&r).unwrap().text, "picture two");
    }

    #[test]
    fn cache_round_trips_and_survives_inner_changes() {
        let dir = tempfile::tempdir().unwrap();
        let r = request("task: pose-selection\nchoose");
        {
            let client = CachingVlm::new(
                MockVlm::with_replies(Some("Image 2".into()), None),
                Some(dir.path().to_path_buf()),
                Duration::ZERO,
            );
            assert_eq!(client.complete(&r).unwrap().text, "Image 2");
        }
        // second client would answer differently, but the cache replies
        let client = CachingVlm::new(
            MockVlm::with_replies(Some("Image 5".into()), None),
            Some(dir.path().to_path_buf()),
            Duration::ZERO,
        );
        assert_eq!(client.complete(&r).unwrap().text, "Image 2");
    }

    #[test]
    fn remote_without_credentials_is_unavailable() {
        std::env::remove_var("HOIGEN_VLM_ENDPOINT");
        assert!(matches!(
            create("remote", None, None, None, Duration::ZERO),
            Err(Error::VlmUnavailable(_))
        ));
    }
}
