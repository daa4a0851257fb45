//! Annotation store: raters, projects, images and append-only ratings.
//!
//! Every mutation is appended to a JSON-lines journal before it becomes
//! visible, and reopening a directory replays the journals. Raters live in
//! `raters.jsonl`; each project has `projects/{id}.jsonl` plus its image
//! bytes under `projects/{id}/`.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use fthnet_core::dataset::{Level, RaterTier, RatingRecord};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown rater `{0}`")]
    UnknownRater(String),
    #[error("rater `{0}` already registered with another tier")]
    RaterConflict(String),
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("rater `{rater}` already rated image `{image}`")]
    DuplicateRating { rater: String, image: String },
    #[error("invalid rating: {0}")]
    Invalid(String),
    #[error("journal: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal entry: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rater {
    pub id: String,
    pub tier: RaterTier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectInfo {
    pub id: String,
    pub name: String,
    /// Reference-set projects hold per-level exemplars for rater guidance.
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub file: String,
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredRating {
    pub image_id: String,
    #[serde(flatten)]
    pub rating: RatingRecord,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Project(ProjectInfo),
    Image(ImageInfo),
    Rating(StoredRating),
}

#[derive(Debug, Default)]
struct Project {
    info: Option<ProjectInfo>,
    images: Vec<ImageInfo>,
    ratings: Vec<StoredRating>,
    rated: HashSet<(String, String)>,
}

impl Project {
    fn apply(&mut self, e: Event) {
        match e {
            Event::Project(p) => self.info = Some(p),
            Event::Image(i) => self.images.push(i),
            Event::Rating(r) => {
                self.rated.insert((r.image_id.clone(), r.rating.rater_id.clone()));
                self.ratings.push(r);
            }
        }
    }
}

#[derive(Debug, Default)]
struct State {
    raters: HashMap<String, Rater>,
    projects: HashMap<String, Project>,
    order: Vec<String>,
}

pub struct AnnotationStore {
    root: PathBuf,
    state: RwLock<State>,
    /// Serializes journal appends.
    writer: Mutex<()>,
}

fn append(path: &Path, line: &impl Serialize) -> Result<(), StoreError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = serde_json::to_string(line)?;
    text.push('\n');
    f.write_all(text.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

fn replay<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl AnnotationStore {
    /// Open (or create) a store rooted at `root`, replaying its journals.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("projects"))?;
        let mut state = State::default();
        let raters = root.join("raters.jsonl");
        if raters.exists() {
            for r in replay::<Rater>(&raters)? {
                state.raters.insert(r.id.clone(), r);
            }
        }
        let mut journals: Vec<PathBuf> = fs::read_dir(root.join("projects"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        journals.sort();
        for path in journals {
            let mut project = Project::default();
            for e in replay::<Event>(&path)? {
                project.apply(e);
            }
            if let Some(info) = &project.info {
                state.order.push(info.id.clone());
                state.projects.insert(info.id.clone(), project);
            }
        }
        Ok(Self {
            root,
            state: RwLock::new(state),
            writer: Mutex::new(()),
        })
    }

    fn journal(&self, project: &str) -> PathBuf {
        self.root.join("projects").join(format!("{project}.jsonl"))
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register_rater(&self, rater: Rater) -> Result<Rater, StoreError> {
        if !valid_id(&rater.id) {
            return Err(StoreError::Invalid(format!("rater id `{}` must be 1-64 of [A-Za-z0-9_-]", rater.id)));
        }
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = self.read().raters.get(&rater.id) {
            return if existing.tier == rater.tier {
                Ok(existing.clone())
            } else {
                Err(StoreError::RaterConflict(rater.id))
            };
        }
        append(&self.root.join("raters.jsonl"), &rater)?;
        self.write().raters.insert(rater.id.clone(), rater.clone());
        Ok(rater)
    }

    pub fn rater(&self, id: &str) -> Option<Rater> {
        self.read().raters.get(id).cloned()
    }

    pub fn create_project(&self, name: &str, reference: bool) -> Result<ProjectInfo, StoreError> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let id = format!("p{:04}", self.read().order.len() + 1);
        let info = ProjectInfo {
            id: id.clone(),
            name: name.to_string(),
            reference,
        };
        fs::create_dir_all(self.root.join("projects").join(&id))?;
        append(&self.journal(&id), &Event::Project(info.clone()))?;
        let mut st = self.write();
        st.order.push(id.clone());
        st.projects.insert(
            id,
            Project {
                info: Some(info.clone()),
                ..Default::default()
            },
        );
        Ok(info)
    }

    pub fn projects(&self) -> Vec<ProjectInfo> {
        let st = self.read();
        st.order.iter().filter_map(|id| st.projects[id].info.clone()).collect()
    }

    /// Store image bytes (already validated by the caller) in a project.
    pub fn add_image(&self, project: &str, bytes: &[u8], ext: &str, reference: bool) -> Result<ImageInfo, StoreError> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let n = self
            .read()
            .projects
            .get(project)
            .map(|p| p.images.len())
            .ok_or_else(|| StoreError::UnknownProject(project.to_string()))?;
        let id = format!("i{:05}", n + 1);
        let file = format!("{id}.{ext}");
        fs::write(self.root.join("projects").join(project).join(&file), bytes)?;
        let info = ImageInfo { id, file, reference };
        append(&self.journal(project), &Event::Image(info.clone()))?;
        self.write()
            .projects
            .get_mut(project)
            .expect("checked above")
            .images
            .push(info.clone());
        Ok(info)
    }

    pub fn image_bytes(&self, project: &str, image: &str) -> Result<(ImageInfo, Vec<u8>), StoreError> {
        let info = {
            let st = self.read();
            let p = st
                .projects
                .get(project)
                .ok_or_else(|| StoreError::UnknownProject(project.to_string()))?;
            p.images
                .iter()
                .find(|i| i.id == image)
                .cloned()
                .ok_or_else(|| StoreError::UnknownImage(image.to_string()))?
        };
        let bytes = fs::read(self.root.join("projects").join(project).join(&info.file))?;
        Ok((info, bytes))
    }

    /// First image (in upload order) that `rater` has not rated yet.
    pub fn next_for(&self, project: &str, rater: &str) -> Result<Option<ImageInfo>, StoreError> {
        let st = self.read();
        if !st.raters.contains_key(rater) {
            return Err(StoreError::UnknownRater(rater.to_string()));
        }
        let p = st
            .projects
            .get(project)
            .ok_or_else(|| StoreError::UnknownProject(project.to_string()))?;
        Ok(p.images
            .iter()
            .find(|i| !p.rated.contains(&(i.id.clone(), rater.to_string())))
            .cloned())
    }

    pub fn add_rating(
        &self,
        project: &str,
        image: &str,
        rater: &str,
        score: u8,
        level: Level,
    ) -> Result<StoredRating, StoreError> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let stored = {
            let st = self.read();
            let r = st
                .raters
                .get(rater)
                .ok_or_else(|| StoreError::UnknownRater(rater.to_string()))?;
            let p = st
                .projects
                .get(project)
                .ok_or_else(|| StoreError::UnknownProject(project.to_string()))?;
            if !p.images.iter().any(|i| i.id == image) {
                return Err(StoreError::UnknownImage(image.to_string()));
            }
            if p.rated.contains(&(image.to_string(), rater.to_string())) {
                return Err(StoreError::DuplicateRating {
                    rater: rater.to_string(),
                    image: image.to_string(),
                });
            }
            let rating = RatingRecord {
                rater_id: rater.to_string(),
                tier: r.tier,
                score,
                level,
            };
            rating.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
            StoredRating {
                image_id: image.to_string(),
                rating,
            }
        };
        append(&self.journal(project), &Event::Rating(stored.clone()))?;
        self.write()
            .projects
            .get_mut(project)
            .expect("checked above")
            .apply(Event::Rating(stored.clone()));
        Ok(stored)
    }

    /// Images of `project` with their ratings, in upload order.
    pub fn ratings(&self, project: &str) -> Result<Vec<(ImageInfo, Vec<RatingRecord>)>, StoreError> {
        let st = self.read();
        let p = st
            .projects
            .get(project)
            .ok_or_else(|| StoreError::UnknownProject(project.to_string()))?;
        Ok(p.images
            .iter()
            .map(|i| {
                let rs = p
                    .ratings
                    .iter()
                    .filter(|r| r.image_id == i.id)
                    .map(|r| r.rating.clone())
                    .collect();
                (i.clone(), rs)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = AnnotationStore::open(dir.path()).unwrap();
            s.register_rater(Rater {
                id: "e1".into(),
                tier: RaterTier::Experienced,
            })
            .unwrap();
            let p = s.create_project("batch", false).unwrap();
            let img = s.add_image(&p.id, b"bytes", "png", false).unwrap();
            s.add_rating(&p.id, &img.id, "e1", 80, Level::Good).unwrap();
        }
        let s = AnnotationStore::open(dir.path()).unwrap();
        let ratings = s.ratings("p0001").unwrap();
        assert_eq!(ratings.len(), 1);
        assert_eq!(ratings[0].1[0].score, 80);
        assert!(matches!(
            s.add_rating("p0001", "i00001", "e1", 70, Level::Good),
            Err(StoreError::DuplicateRating { .. })
        ));
        assert_eq!(s.image_bytes("p0001", "i00001").unwrap().1, b"bytes");
    }
}
