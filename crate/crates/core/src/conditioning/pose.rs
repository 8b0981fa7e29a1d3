use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f32, y: f32) -> Self {
        Keypoint { x, y, visible: true }
    }

    pub fn hidden() -> Self {
        Keypoint { x: 0.0, y: 0.0, visible: false }
    }

    /// Integer pixel containing the point.
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }
}

/// Body keypoints in pixel coordinates, origin top-left. Pairs are stored
/// as `[left, right]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseKeypoints {
    pub hands: [Keypoint; 2],
    pub feet: [Keypoint; 2],
    pub shoulders: [Keypoint; 2],
    pub hips: [Keypoint; 2],
    pub head: Keypoint,
}

/// Bones of the skeleton drawn by the pose guider.
pub(crate) fn bones(kp: &PoseKeypoints) -> Vec<(Keypoint, Keypoint)> {
    let neck = if kp.shoulders[0].visible && kp.shoulders[1].visible {
        Keypoint::new(
            (kp.shoulders[0].x + kp.shoulders[1].x) / 2.0,
            (kp.shoulders[0].y + kp.shoulders[1].y) / 2.0,
        )
    } else {
        Keypoint::hidden()
    };
    let mut out = vec![
        (kp.head, neck),
        (kp.shoulders[0], kp.shoulders[1]),
        (kp.hips[0], kp.hips[1]),
    ];
    for side in 0..2 {
        out.push((kp.shoulders[side], kp.hips[side]));
        out.push((kp.shoulders[side], kp.hands[side]));
        out.push((kp.hips[side], kp.feet[side]));
    }
    out.retain(|(a, b)| a.visible && b.visible);
    out
}

impl PoseKeypoints {
    pub fn all(&self) -> [Keypoint; 9] {
        [
            self.hands[0],
            self.hands[1],
            self.feet[0],
            self.feet[1],
            self.shoulders[0],
            self.shoulders[1],
            self.hips[0],
            self.hips[1],
            self.head,
        ]
    }

    pub fn any_visible(&self) -> bool {
        self.all().iter().any(|k| k.visible)
    }

    /// Every visible point lies inside a `width × height` image.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.all().iter().filter(|k| k.visible).all(|k| {
            k.x >= 0.0 && k.y >= 0.0 && k.x < width as f32 && k.y < height as f32
        })
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !self.within(width, height) {
            return Err(Error::Domain(format!(
                "visible keypoints must lie inside the {width}x{height} image"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&KeypointsJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: KeypointsJson = serde_json::from_str(s)?;
        Ok(j.into())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::Dataset { path: path.into(), reason: e.to_string() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct VisibleJson {
    hands: [bool; 2],
    feet: [bool; 2],
    shoulders: [bool; 2],
    hips: [bool; 2],
    head: bool,
}

impl Default for VisibleJson {
    fn default() -> Self {
        VisibleJson { hands: [true; 2], feet: [true; 2], shoulders: [true; 2], hips: [true; 2], head: true }
    }
}

/// `{"hands": [[x, y], [x, y]], ..., "head": [x, y], "visible": {...}}`.
#[derive(Serialize, Deserialize)]
struct KeypointsJson {
    hands: [[f32; 2]; 2],
    feet: [[f32; 2]; 2],
    shoulders: [[f32; 2]; 2],
    hips: [[f32; 2]; 2],
    head: [f32; 2],
    #[serde(default)]
    visible: VisibleJson,
}

impl From<&PoseKeypoints> for KeypointsJson {
    fn from(kp: &PoseKeypoints) -> Self {
        let pair = |p: &[Keypoint; 2]| [[p[0].x, p[0].y], [p[1].x, p[1].y]];
        let vis = |p: &[Keypoint; 2]| [p[0].visible, p[1].visible];
        KeypointsJson {
            hands: pair(&kp.hands),
            feet: pair(&kp.feet),
            shoulders: pair(&kp.shoulders),
            hips: pair(&kp.hips),
            head: [kp.head.x, kp.head.y],
            visible: VisibleJson {
                hands: vis(&kp.hands),
                feet: vis(&kp.feet),
                shoulders: vis(&kp.shoulders),
                hips: vis(&kp.hips),
                head: kp.head.visible,
            },
        }
    }
}

impl From<KeypointsJson> for PoseKeypoints {
    fn from(j: KeypointsJson) -> Self {
        let pair = |p: [[f32; 2]; 2], v: [bool; 2]| {
            [
                Keypoint { x: p[0][0], y: p[0][1], visible: v[0] },
                Keypoint { x: p[1][0], y: p[1][1], visible: v[1] },
            ]
        };
        PoseKeypoints {
            hands: pair(j.hands, j.visible.hands),
            feet: pair(j.feet, j.visible.feet),
            shoulders: pair(j.shoulders, j.visible.shoulders),
            hips: pair(j.hips, j.visible.hips),
            head: Keypoint { x: j.head[0], y: j.head[1], visible: j.visible.head },
        }
    }
}

fn segment_distance(px: f32, py: f32, a: Keypoint, b: Keypoint) -> f32 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Skeleton heatmap: bones as anti-aliased 2-px lines, joints as gaussian
/// dots about 3 px across. Returns `height × width` values in `[0, 1]`.
pub fn rasterize_skeleton(kp: &PoseKeypoints, width: usize, height: usize) -> Vec<f32> {
    let bones = bones(kp);
    let joints: Vec<Keypoint> = kp.all().into_iter().filter(|k| k.visible).collect();
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut v = 0.0f32;
            for &(a, b) in &bones {
                // full intensity within 0.5 px of the bone, zero beyond 1.5 px
                let d = segment_distance(px, py, a, b);
                v = v.max((1.5 - d).clamp(0.0, 1.0));
            }
            for j in &joints {
                let d2 = (px - j.x).powi(2) + (py - j.y).powi(2);
                if d2 <= 9.0 {
                    v = v.max((-d2 / 2.0).exp());
                }
            }
            out[y * width + x] = v;
        }
    }
    out
}
