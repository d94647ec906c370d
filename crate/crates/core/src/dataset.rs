//! Multi-view dataset generation and loading.
//!
//! Each scene directory holds `meta.json` plus per-view T32 tensors (rgb,
//! depth, normal) rendered by the analytic oracle; `manifest.json` at the
//! root lists scene directories and the 7:1 train/held-out split. The four
//! reference condition maps are recomputed at load time from the stored
//! reference view — the extractors are deterministic, so this is exact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{make_view_grid, CameraPose, ViewGrid, ViewLabel};
use crate::conditions::{extract_from_parts, ConditionKind, ConditionMap};
use crate::scene::{gen_scene, oracle_render};
use crate::t32::{read_t32, write_t32};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    T32(#[from] crate::t32::T32Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    /// Azimuth ring sizes; top and bottom views are always added.
    pub views: [usize; 2],
    pub res: usize,
    pub seed: u64,
    pub radius: f32,
    pub fov_y_rad: f32,
    pub far: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 72,
            views: [8, 4],
            res: 64,
            seed: 7,
            radius: 2.5,
            fov_y_rad: 50.0f32.to_radians(),
            far: 4.5,
        }
    }
}

impl DatasetConfig {
    pub fn grid(&self) -> ViewGrid {
        make_view_grid(self.views[0], self.views[1], self.radius, self.fov_y_rad, self.res)
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneEntry {
    pub dir: String,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ViewMeta {
    elevation_deg: f32,
    azimuth_deg: f32,
    pose_row_major: Vec<f32>,
    fov_y_rad: f32,
    width: usize,
    height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneMeta {
    caption: String,
    reference_index: usize,
    views: Vec<ViewMeta>,
}

/// Every 8th scene is held out (7:1).
fn split_of(index: usize) -> Split {
    if index % 8 == 7 {
        Split::HeldOut
    } else {
        Split::Train
    }
}

/// Generate scenes, oracle-render every grid view, and write the dataset
/// tree. Returns the manifest (also written to `manifest.json`).
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest, DatasetError> {
    let grid = cfg.grid();
    let mut entries = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let scene = gen_scene(cfg.scene_seed(i));
        let dir_name = format!("scene_{:04}", i);
        let scene_dir = out_dir.join(&dir_name);
        std::fs::create_dir_all(&scene_dir).map_err(|e| io_err(&scene_dir, e))?;

        let mut views_meta = Vec::with_capacity(grid.poses.len());
        for (v, (pose, label)) in grid.poses.iter().zip(&grid.labels).enumerate() {
            let view = oracle_render(&scene, pose, cfg.far);
            let r = cfg.res;
            write_t32(
                &scene_dir.join(format!("view_{:02}_rgb.t32", v)),
                &view.rgb,
                &[r, r, 3],
            )?;
            write_t32(
                &scene_dir.join(format!("view_{:02}_depth.t32", v)),
                &view.depth,
                &[r, r],
            )?;
            write_t32(
                &scene_dir.join(format!("view_{:02}_normal.t32", v)),
                &view.normal,
                &[r, r, 3],
            )?;
            views_meta.push(ViewMeta {
                elevation_deg: label.elevation_deg,
                azimuth_deg: label.azimuth_deg,
                pose_row_major: pose.transform.to_vec(),
                fov_y_rad: pose.fov_y,
                width: pose.width,
                height: pose.height,
            });
        }
        let meta = SceneMeta {
            caption: scene.caption.clone(),
            // First equatorial-ring view: azimuth 0, elevation 0 — the
            // normalized frontal reference.
            reference_index: cfg.views[0],
            views: views_meta,
        };
        let meta_path = scene_dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("serializable");
        std::fs::write(&meta_path, json).map_err(|e| io_err(&meta_path, e))?;
        entries.push(SceneEntry {
            dir: dir_name,
            split: split_of(i),
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        scenes: entries,
    };
    let mpath = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&mpath, json).map_err(|e| io_err(&mpath, e))?;
    Ok(manifest)
}

/// One stored view, loaded.
pub struct ViewData {
    pub pose: CameraPose,
    pub label: ViewLabel,
    /// [res·res·3]
    pub rgb: Vec<f32>,
    /// [res·res] ray distance
    pub depth: Vec<f32>,
    /// [res·res·3] camera-space unit normals
    pub normal: Vec<f32>,
    /// [res·res] 1 where the oracle hit geometry
    pub mask: Vec<f32>,
}

/// A loaded scene: ground-truth views plus the four reference condition
/// maps.
pub struct MultiViewSample {
    pub caption: String,
    pub reference_index: usize,
    pub views: Vec<ViewData>,
    pub conditions: BTreeMap<ConditionKind, ConditionMap>,
}

impl MultiViewSample {
    pub fn reference(&self) -> &ViewData {
        &self.views[self.reference_index]
    }

    pub fn condition(&self, kind: ConditionKind) -> &ConditionMap {
        &self.conditions[&kind]
    }
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset, DatasetError> {
        let mpath = root.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
            path: mpath.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Load one scene, recomputing its reference condition maps.
    pub fn load_scene(&self, index: usize) -> Result<MultiViewSample, DatasetError> {
        let entry = &self.manifest.scenes[index];
        let dir = self.root.join(&entry.dir);
        let mpath = dir.join("meta.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
        let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
            path: mpath.display().to_string(),
            detail: e.to_string(),
        })?;
        let far = self.manifest.config.far;
        let mut views = Vec::with_capacity(meta.views.len());
        for (v, vm) in meta.views.iter().enumerate() {
            let transform: [f32; 16] =
                vm.pose_row_major
                    .as_slice()
                    .try_into()
                    .map_err(|_| DatasetError::Format {
                        path: mpath.display().to_string(),
                        detail: format!("view {v}: pose_row_major must hold 16 reals"),
                    })?;
            let pose = CameraPose::from_matrix(transform, vm.fov_y_rad, vm.width, vm.height)
                .map_err(|e| DatasetError::Format {
                    path: mpath.display().to_string(),
                    detail: format!("view {v}: {e}"),
                })?;
            let (rgb, _) = read_t32(&dir.join(format!("view_{:02}_rgb.t32", v)))?;
            let (depth, _) = read_t32(&dir.join(format!("view_{:02}_depth.t32", v)))?;
            let (normal, _) = read_t32(&dir.join(format!("view_{:02}_normal.t32", v)))?;
            let mask: Vec<f32> = depth
                .iter()
                .map(|d| if *d < far - 1e-4 { 1.0 } else { 0.0 })
                .collect();
            views.push(ViewData {
                pose,
                label: ViewLabel {
                    elevation_deg: vm.elevation_deg,
                    azimuth_deg: vm.azimuth_deg,
                    radius: self.manifest.config.radius,
                },
                rgb,
                depth,
                normal,
                mask,
            });
        }
        let reference_index = meta.reference_index;
        let conditions = reference_conditions(&views[reference_index])?;
        Ok(MultiViewSample {
            caption: meta.caption,
            reference_index,
            views,
            conditions,
        })
    }
}

/// The four condition maps of a view, extracted from its stored buffers.
pub fn reference_conditions(
    view: &ViewData,
) -> Result<BTreeMap<ConditionKind, ConditionMap>, DatasetError> {
    let (h, w) = (view.pose.height, view.pose.width);
    let rgb = Tensor::from_vec(view.rgb.clone(), &[h, w, 3])?;
    let depth = Tensor::from_vec(view.depth.clone(), &[h, w])?;
    let mut out = BTreeMap::new();
    for kind in ConditionKind::ALL {
        let cond = extract_from_parts(kind, &rgb, &depth, &view.mask, view.pose.focal_px())?;
        out.insert(kind, cond);
    }
    Ok(out)
}

impl std::cmp::Ord for ConditionKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as usize).cmp(&(*other as usize))
    }
}

impl std::cmp::PartialOrd for ConditionKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(n_scenes: usize) -> DatasetConfig {
        DatasetConfig {
            n_scenes,
            views: [4, 2],
            res: 16,
            seed: 5,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn dataset_tree_has_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            views: [8, 4],
            ..tiny_cfg(8)
        };
        let manifest = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.scenes.len(), 8);
        for entry in &manifest.scenes {
            let scene_dir = dir.path().join(&entry.dir);
            let files: Vec<_> = std::fs::read_dir(&scene_dir).unwrap().collect();
            // 1 meta + 14 views × 3 tensors.
            assert_eq!(files.len(), 1 + 14 * 3);
        }
        let held: usize = manifest
            .scenes
            .iter()
            .filter(|e| e.split == Split::HeldOut)
            .count();
        assert_eq!(held, 1); // 7:1
    }

    #[test]
    fn roundtrip_preserves_tensors_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(2);
        build_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let scene = ds.load_scene(0).unwrap();
        // Regenerate the same view and compare bitwise.
        let spec = gen_scene(cfg.scene_seed(0));
        let grid = cfg.grid();
        let want = oracle_render(&spec, &grid.poses[3], cfg.far);
        let got = &scene.views[3];
        assert_eq!(
            want.rgb.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            got.rgb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            want.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            got.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn build_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(3);
        build_dataset(&cfg, d1.path()).unwrap();
        build_dataset(&cfg, d2.path()).unwrap();
        for entry in ["manifest.json", "scene_0001/meta.json", "scene_0001/view_02_rgb.t32"] {
            let a = std::fs::read(d1.path().join(entry)).unwrap();
            let b = std::fs::read(d2.path().join(entry)).unwrap();
            assert_eq!(a, b, "{entry} differs");
        }
    }

    #[test]
    fn loaded_scene_has_reference_conditions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(1);
        build_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let scene = ds.load_scene(0).unwrap();
        assert_eq!(scene.reference_index, 4); // first ring-2 view
        for kind in ConditionKind::ALL {
            let c = scene.condition(kind);
            assert_eq!(c.kind, kind);
            let (h, w) = c.resolution();
            assert_eq!((h, w), (16, 16));
        }
        assert!(!scene.caption.is_empty());
    }
}
