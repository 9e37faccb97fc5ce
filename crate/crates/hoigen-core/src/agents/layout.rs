//! Pose Selection Agent and Layout Agent.
//!
//! Both agents share the VLM client, the three few-shot exemplars, a retry
//! budget and a transcript log. Requests are plain text plus PNG
//! attachments; replies go through the deterministic grammar in
//! [`super::parse`].

use super::parse::{parse_box, parse_pose_index, parse_visual_attributes};
use super::pose::PoseKeypoints;
use super::vlm::{VlmClient, VlmImage, VlmRequest, LAYOUT_TASK_MARKER, POSE_TASK_MARKER};
use super::{BoundingBox, LayoutSuggestion};
use crate::coarse::CandidateImage;
use crate::error::{Error, Result};
use crate::prompt::PromptPair;
use std::path::Path;

const REASK_SUFFIX: &str =
    "\nyour previous reply could not be parsed; answer again in the requested format.";

/// Default few-shot exemplars, embedded from `fixtures/fewshot/`.
pub fn default_exemplars() -> Vec<String> {
    vec![
        include_str!("../../../../fixtures/fewshot/1.txt").to_string(),
        include_str!("../../../../fixtures/fewshot/2.txt").to_string(),
        include_str!("../../../../fixtures/fewshot/3.txt").to_string(),
    ]
}

/// Load exemplars `1.txt`..`3.txt` from a directory instead.
pub fn load_exemplars(dir: &Path) -> Result<Vec<String>> {
    (1..=3)
        .map(|i| {
            std::fs::read_to_string(dir.join(format!("{i}.txt"))).map_err(Error::from)
        })
        .collect()
}

/// Transcript of every agent exchange in a run, written next to the other
/// artifacts for audit. Content is fully deterministic.
#[derive(Debug, Default, Clone)]
pub struct AgentLog {
    entries: Vec<(String, String, String)>,
}

impl AgentLog {
    pub fn record(&mut self, agent: &str, request: &VlmRequest, response: &str) {
        let images: Vec<String> = request.images.iter().map(|i| i.label.clone()).collect();
        let header = format!("images: [{}]", images.join(", "));
        self.entries.push((
            agent.to_string(),
            format!("{header}\n{}", request.instruction),
            response.to_string(),
        ));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (agent, request, response)) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "=== exchange {} [{agent}] ===\n--- request ---\n{request}\n--- response ---\n{response}\n\n",
                i + 1
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

fn format_box(b: &BoundingBox) -> String {
    format!(
        "[{:.4}, {:.4}, {:.4}, {:.4}]",
        b.x_min, b.y_min, b.x_max, b.y_max
    )
}

/// Ask the VLM which candidate best matches the prompt. With a single
/// candidate the choice is forced and no call is issued.
pub fn select_pose(
    candidates: &[CandidateImage],
    pair: &PromptPair,
    vlm: &dyn VlmClient,
    exemplars: &[String],
    retries: usize,
    log: &mut AgentLog,
) -> Result<usize> {
    let k = candidates.len();
    if k == 0 {
        return Err(Error::CandidateCountZero);
    }
    if k == 1 {
        return Ok(0);
    }
    let mut instruction = format!(
        "{POSE_TASK_MARKER}\nprompt: {}\nthe attached {k} images are candidate renderings. \
         pick the one whose human pose matches the interaction in the prompt. \
         reply with the image number, e.g. \"Image 2\".",
        pair.full_prompt
    );
    let images: Result<Vec<VlmImage>> = candidates
        .iter()
        .map(|c| VlmImage::from_pixels(&format!("image {}", c.index + 1), &c.preview))
        .collect();
    let images = images?;

    let mut attempt = 0;
    loop {
        let request = VlmRequest::new(
            instruction.clone(),
            images.clone(),
            exemplars.to_vec(),
            k + 1,
        )?;
        let response = vlm.complete(&request)?;
        log.record("pose-selection", &request, &response.text);
        match parse_pose_index(&response.text, k) {
            Ok(index) => return Ok(index),
            Err(e @ Error::UnparsableAgentReply(_)) => {
                if attempt >= retries {
                    return Err(e);
                }
                attempt += 1;
                instruction.push_str(REASK_SUFFIX);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Ask the VLM where the object belongs, given the selected candidate, the
/// detected keypoints and both boxes. The reply's first bracket group is
/// the proposed box; the change gate decides whether correction runs.
#[allow(clippy::too_many_arguments)]
pub fn suggest_layout(
    selected: &CandidateImage,
    points: &PoseKeypoints,
    human_box: &BoundingBox,
    extracted_box: &BoundingBox,
    pair: &PromptPair,
    vlm: &dyn VlmClient,
    exemplars: &[String],
    change_threshold: f64,
    retries: usize,
    log: &mut AgentLog,
) -> Result<LayoutSuggestion> {
    let mut instruction = format!(
        "{LAYOUT_TASK_MARKER}\nprompt: {}\n\
         guidelines:\n\
         - keep the human box {} intact; the chosen pose must not move\n\
         - rearrange only the object and reduce overlap between human and object regions\n\
         - reason step by step through visual attributes first: pose type, body orientation, object relation\n\
         - reply with the proposed object box as [x_min, y_min, x_max, y_max] in unit coordinates\n\
         human keypoints ({} landmarks):\n{}\
         human box: {}\n\
         extracted object box: {}\n",
        pair.full_prompt,
        format_box(human_box),
        points.valid_points().count(),
        points.describe(),
        format_box(human_box),
        format_box(extracted_box),
    );
    let image = VlmImage::from_pixels("selected candidate", &selected.preview)?;
    let dims = (selected.preview.width(), selected.preview.height());

    let mut attempt = 0;
    loop {
        let request = VlmRequest::new(
            instruction.clone(),
            vec![image.clone()],
            exemplars.to_vec(),
            2,
        )?;
        let response = vlm.complete(&request)?;
        log.record("layout", &request, &response.text);
        match parse_box(&response.text, dims) {
            Ok(proposed) => {
                let attributes = parse_visual_attributes(&response.text);
                return Ok(LayoutSuggestion::new(
                    *extracted_box,
                    proposed,
                    change_threshold,
                    response.text,
                    attributes,
                ));
            }
            Err(e @ Error::UnparsableAgentReply(_)) => {
                if attempt >= retries {
                    return Err(e);
                }
                attempt += 1;
                instruction.push_str(REASK_SUFFIX);
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::vlm::MockVlm;
    use crate::backbone::toy::ToyBackbone;
    use crate::backbone::Backbone;
    use crate::coarse::generate_candidates;
    use crate::config::GuidanceConfig;
    use crate::prompt::{render_prompts, HoiTriplet, WhitespaceTokenizer};
    use std::collections::BTreeMap;

    fn candidates(k: usize) -> (Vec<CandidateImage>, PromptPair) {
        let t = HoiTriplet::new("man", "carry", "bicycle").unwrap();
        let pair = render_prompts(&t, &WhitespaceTokenizer, &BTreeMap::new()).unwrap();
        let cfg = GuidanceConfig {
            candidates: k,
            t1: 4,
            ..GuidanceConfig::default()
        };
        let bb = ToyBackbone::new();
        (
            generate_candidates(&pair, &cfg, &bb, 0, true).unwrap(),
            pair,
        )
    }

    fn keypoints() -> PoseKeypoints {
        let bb = ToyBackbone::new();
        let state = bb.init_latent(0, 4);
        let img = bb.decode(&state).unwrap();
        crate::agents::pose::SyntheticBackend
            .detect(&img)
            .unwrap()
    }

    use crate::agents::pose::KeypointBackend;

    #[test]
    fn pose_selection_parses_the_reply() {
        let (cands, pair) = candidates(5);
        let vlm = MockVlm::with_replies(Some("Image 3".into()), None);
        let mut log = AgentLog::default();
        let idx = select_pose(&cands, &pair, &vlm, &default_exemplars(), 2, &mut log).unwrap();
        assert_eq!(idx, 2);
        assert!(!log.is_empty());
    }

    #[test]
    fn single_candidate_skips_the_vlm() {
        let (cands, pair) = candidates(1);
        // a mock that always errors proves no call happens
        struct Failing;
        impl VlmClient for Failing {
            fn id(&self) -> &str {
                "fail"
            }
            fn complete(&self, _r: &VlmRequest) -> Result<crate::agents::vlm::VlmResponse> {
                Err(Error::VlmUnavailable("must not be called".into()))
            }
        }
        let mut log = AgentLog::default();
        let idx = select_pose(&cands, &pair, &Failing, &default_exemplars(), 2, &mut log).unwrap();
        assert_eq!(idx, 0);
        assert!(log.is_empty());
    }

    #[test]
    fn word_number_replies_select_too() {
        let (cands, pair) = candidates(5);
        let vlm = MockVlm::with_replies(Some("the best is picture two".into()), None);
        let mut log = AgentLog::default();
        let idx = select_pose(&cands, &pair, &vlm, &default_exemplars(), 2, &mut log).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn unparsable_replies_exhaust_the_retry_budget() {
        let (cands, pair) = candidates(3);
        let vlm = MockVlm::with_replies(Some("hmm, hard to say".into()), None);
        let mut log = AgentLog::default();
        let err = select_pose(&cands, &pair, &vlm, &default_exemplars(), 2, &mut log);
        assert!(matches!(err, Err(Error::UnparsableAgentReply(_))));
        // initial ask + two retries
        assert_eq!(log.render().matches("=== exchange").count(), 3);
    }

    #[test]
    fn layout_parses_box_and_attributes() {
        let (cands, pair) = candidates(2);
        let vlm = MockVlm::with_replies(
            None,
            Some("pose type: standing\nproposed box: [0.10, 0.50, 0.40, 0.90]".into()),
        );
        let kp = keypoints();
        let b_h = crate::agents::human_box(&kp, 0.05).unwrap();
        let b_o = BoundingBox::new(0.1, 0.5, 0.4, 0.9).unwrap();
        let mut log = AgentLog::default();
        let s = suggest_layout(
            &cands[0],
            &kp,
            &b_h,
            &b_o,
            &pair,
            &vlm,
            &default_exemplars(),
            0.8,
            2,
            &mut log,
        )
        .unwrap();
        assert_eq!(s.proposed_box, b_o);
        assert!(!s.needs_correction); // identical boxes: IoU = 1
        assert_eq!(s.visual_attributes[0].1, "standing");
    }

    #[test]
    fn echo_mock_signals_no_changes() {
        let (cands, pair) = candidates(2);
        let vlm = MockVlm::new(); // default: echo the extracted box
        let kp = keypoints();
        let b_h = crate::agents::human_box(&kp, 0.05).unwrap();
        let b_o = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let mut log = AgentLog::default();
        let s = suggest_layout(
            &cands[0],
            &kp,
            &b_h,
            &b_o,
            &pair,
            &vlm,
            &default_exemplars(),
            0.8,
            2,
            &mut log,
        )
        .unwrap();
        assert!(!s.needs_correction);
    }

    #[test]
    fn no_numbers_reply_is_unparsable() {
        let (cands, pair) = candidates(2);
        let vlm = MockVlm::with_replies(None, Some("move it left".into()));
        let kp = keypoints();
        let b_h = crate::agents::human_box(&kp, 0.05).unwrap();
        let b_o = BoundingBox::new(0.1, 0.5, 0.4, 0.9).unwrap();
        let mut log = AgentLog::default();
        let err = suggest_layout(
            &cands[0],
            &kp,
            &b_h,
            &b_o,
            &pair,
            &vlm,
            &default_exemplars(),
            0.8,
            1,
            &mut log,
        );
        assert!(matches!(err, Err(Error::UnparsableAgentReply(_))));
    }
}
