//! Native lossless JSON formats: single clips, single skeletons, and
//! dataset directories with a split manifest.
//!
//! Numbers are emitted as shortest exact decimals, so parsing returns
//! bit-identical values; round-trip fidelity is far inside the 1e-9
//! contract the tests pin down.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Skeleton;

use super::{ClipEntry, Dataset, MotionClip, Scenario, Split};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClipDocument {
    version: u32,
    skeleton: Skeleton,
    clip: MotionClip,
}

#[derive(Serialize, Deserialize)]
struct SkeletonDocument {
    version: u32,
    skeleton: Skeleton,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    skeletons: Vec<String>,
    clips: Vec<ManifestClip>,
}

#[derive(Serialize, Deserialize)]
struct ManifestClip {
    file: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenario: Option<Scenario>,
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::SchemaVersion { found, supported: FORMAT_VERSION });
    }
    Ok(())
}

/// Serializes a clip with its skeleton into one self-contained document.
pub fn write_clip_json(skeleton: &Skeleton, clip: &MotionClip) -> Result<String> {
    clip.validate()?;
    if skeleton.n_joints() != clip.n_joints() {
        return Err(Error::ArityMismatch {
            expected: skeleton.n_joints(),
            got: clip.n_joints(),
        });
    }
    let doc = ClipDocument {
        version: FORMAT_VERSION,
        skeleton: skeleton.clone(),
        clip: clip.clone(),
    };
    Ok(serde_json::to_string(&doc)?)
}

/// Parses and validates a clip document.
pub fn parse_clip_json(text: &str) -> Result<(Skeleton, MotionClip)> {
    let doc: ClipDocument = serde_json::from_str(text)?;
    check_version(doc.version)?;
    doc.clip.validate()?;
    if doc.skeleton.n_joints() != doc.clip.n_joints() {
        return Err(Error::ArityMismatch {
            expected: doc.skeleton.n_joints(),
            got: doc.clip.n_joints(),
        });
    }
    Ok((doc.skeleton, doc.clip))
}

pub fn write_skeleton_json(skeleton: &Skeleton) -> Result<String> {
    let doc = SkeletonDocument { version: FORMAT_VERSION, skeleton: skeleton.clone() };
    Ok(serde_json::to_string(&doc)?)
}

pub fn parse_skeleton_json(text: &str) -> Result<Skeleton> {
    let doc: SkeletonDocument = serde_json::from_str(text)?;
    check_version(doc.version)?;
    Ok(doc.skeleton)
}

pub fn load_clip_file(path: &Path) -> Result<(Skeleton, MotionClip)> {
    parse_clip_json(&fs::read_to_string(path)?)
}

pub fn save_clip_file(path: &Path, skeleton: &Skeleton, clip: &MotionClip) -> Result<()> {
    let text = write_clip_json(skeleton, clip)?;
    let mut file = fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn load_skeleton_file(path: &Path) -> Result<Skeleton> {
    parse_skeleton_json(&fs::read_to_string(path)?)
}

impl Dataset {
    /// Writes `manifest.json`, one skeleton file per character, and one
    /// clip file per entry under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir.join("skeletons"))?;
        fs::create_dir_all(dir.join("clips"))?;
        let mut manifest = Manifest {
            version: FORMAT_VERSION,
            skeletons: Vec::new(),
            clips: Vec::new(),
        };
        for (name, skeleton) in &self.skeletons {
            let rel = format!("skeletons/{name}.json");
            fs::write(dir.join(&rel), write_skeleton_json(skeleton)?)?;
            manifest.skeletons.push(rel);
        }
        let mut used = BTreeMap::new();
        for entry in &self.entries {
            let base = format!("{}__{}", entry.clip.name, entry.clip.skeleton_id);
            let n = used.entry(base.clone()).or_insert(0usize);
            let rel = if *n == 0 {
                format!("clips/{base}.json")
            } else {
                format!("clips/{base}__{n}.json")
            };
            *n += 1;
            let skeleton = self.skeleton_of(&entry.clip)?;
            save_clip_file(&dir.join(&rel), skeleton, &entry.clip)?;
            manifest.clips.push(ManifestClip {
                file: rel,
                split: entry.split,
                scenario: entry.scenario,
            });
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| {
                Error::Dataset(format!("{}: {e}", manifest_path.display()))
            })?,
        )?;
        check_version(manifest.version)?;
        let mut dataset = Dataset::default();
        for rel in &manifest.skeletons {
            let skeleton = load_skeleton_file(&dir.join(rel))?;
            if dataset
                .skeletons
                .insert(skeleton.name().to_string(), skeleton)
                .is_some()
            {
                return Err(Error::Dataset(format!("duplicate skeleton in {rel:?}")));
            }
        }
        for mc in &manifest.clips {
            let (skeleton, clip) = load_clip_file(&dir.join(&mc.file))?;
            match dataset.skeletons.get(&clip.skeleton_id) {
                None => {
                    return Err(Error::Dataset(format!(
                        "clip {:?} references skeleton {:?} absent from manifest",
                        mc.file, clip.skeleton_id
                    )))
                }
                Some(listed) => {
                    // The embedded skeleton must agree with the shared one.
                    if listed.joint_names() != skeleton.joint_names()
                        || listed.tpose() != skeleton.tpose()
                    {
                        return Err(Error::Dataset(format!(
                            "clip {:?} embeds a skeleton that disagrees with {:?}",
                            mc.file, clip.skeleton_id
                        )));
                    }
                }
            }
            dataset.entries.push(ClipEntry {
                clip,
                split: mc.split,
                scenario: mc.scenario,
            });
        }
        dataset.validate()?;
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_clip, tiny_skeleton};
    use super::*;
    use crate::quat::Quat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64) -> MotionClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.gen_range(2..12);
        let joints = tiny_skeleton().n_joints();
        let mut clip = tiny_clip(frames);
        for t in 0..frames {
            for j in 1..joints {
                for k in 0..3 {
                    clip.local[t][j][k] = rng.gen_range(-100.0..100.0);
                }
            }
            for k in 0..3 {
                clip.global[t][k] = rng.gen_range(-10.0..10.0);
            }
            clip.global[t][3] = rng.gen_range(-179.0..179.0);
        }
        clip.initial_root = [rng.gen(), rng.gen(), rng.gen()];
        clip.initial_yaw_deg = rng.gen_range(-180.0..180.0);
        clip.name = format!("random-{seed}");
        clip
    }

    #[test]
    fn clip_round_trip_is_bit_exact() {
        let skeleton = tiny_skeleton();
        for seed in 0..100 {
            let clip = random_clip(seed);
            let text = write_clip_json(&skeleton, &clip).unwrap();
            let (skeleton2, clip2) = parse_clip_json(&text).unwrap();
            assert_eq!(skeleton.joint_names(), skeleton2.joint_names());
            assert_eq!(skeleton.tpose(), skeleton2.tpose());
            assert_eq!(clip.local, clip2.local);
            assert_eq!(clip.global, clip2.global);
            assert_eq!(clip.initial_root, clip2.initial_root);
            assert!(clip.initial_yaw_deg == clip2.initial_yaw_deg);
        }
    }

    #[test]
    fn rotations_survive_round_trip() {
        let skeleton = tiny_skeleton();
        let mut clip = tiny_clip(3);
        clip.rotations =
            Some(vec![vec![Quat::IDENTITY; skeleton.n_joints()]; clip.n_frames()]);
        let text = write_clip_json(&skeleton, &clip).unwrap();
        let (_, clip2) = parse_clip_json(&text).unwrap();
        assert_eq!(clip2.rotations.unwrap().len(), 3);
    }

    #[test]
    fn single_frame_clip_is_rejected_on_write_and_parse() {
        let skeleton = tiny_skeleton();
        let clip = tiny_clip(1);
        assert!(write_clip_json(&skeleton, &clip).is_err());
        // Hand-build the same invalid document; parsing must reject it.
        let doc = serde_json::json!({
            "version": FORMAT_VERSION,
            "skeleton": serde_json::to_value(&skeleton).unwrap(),
            "clip": serde_json::to_value(&clip).unwrap(),
        });
        assert!(parse_clip_json(&doc.to_string()).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let skeleton = tiny_skeleton();
        let text = write_clip_json(&skeleton, &tiny_clip(4)).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            parse_clip_json(&bumped),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
        let stext = write_skeleton_json(&skeleton).unwrap();
        let sbumped = stext.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            parse_skeleton_json(&sbumped),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn malformed_schema_is_a_descriptive_error() {
        let err = parse_clip_json("{\"version\": 1, \"clip\": 3}").unwrap_err();
        assert!(matches!(err, Error::Json(_)));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut dataset = Dataset::default();
        dataset.skeletons.insert("tiny".into(), tiny_skeleton());
        for (i, split) in [Split::Train, Split::Train, Split::Test].iter().enumerate() {
            let mut clip = random_clip(i as u64);
            clip.name = format!("clip-{i}");
            dataset.entries.push(ClipEntry {
                clip,
                split: *split,
                scenario: (*split == Split::Test)
                    .then_some(Scenario::KnownMotionKnownCharacter),
            });
        }
        dataset.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.entries.len(), 3);
        assert_eq!(loaded.train_entries().count(), 2);
        assert_eq!(loaded.test_entries().count(), 1);
        assert_eq!(
            loaded.test_entries().next().unwrap().scenario,
            Some(Scenario::KnownMotionKnownCharacter)
        );
        for (a, b) in dataset.entries.iter().zip(&loaded.entries) {
            assert_eq!(a.clip.local, b.clip.local);
            assert_eq!(a.clip.global, b.clip.global);
        }
    }

    #[test]
    fn dataset_load_rejects_missing_skeleton() {
        let dir = tempfile::tempdir().unwrap();
        let mut dataset = Dataset::default();
        dataset.skeletons.insert("tiny".into(), tiny_skeleton());
        dataset.entries.push(ClipEntry {
            clip: tiny_clip(4),
            split: Split::Train,
            scenario: None,
        });
        dataset.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("skeletons/tiny.json")).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
