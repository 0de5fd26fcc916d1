use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionDatasetEntry {
    /// Face crop path relative to the dataset root.
    pub image_ref: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionDataset {
    /// Label set exactly as listed in `labels.txt`.
    pub labels: Vec<String>,
    pub entries: Vec<EmotionDatasetEntry>,
}

impl EmotionDataset {
    pub fn split(&self, split: Split) -> Vec<&EmotionDatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[derive(Deserialize)]
struct Row {
    image: String,
    label: String,
}

/// Load an emotion dataset laid out as
///
/// ```text
/// <root>/labels.txt          one label per line (blank lines and `#` comments ignored)
/// <root>/splits/train.csv    header `image,label`, image paths relative to root
/// <root>/splits/val.csv
/// <root>/splits/test.csv
/// ```
pub fn load_emotion_dataset(root: &Path) -> Result<EmotionDataset, CorpusError> {
    let manifest_path = root.join("labels.txt");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|_| CorpusError::MissingManifest(manifest_path.clone()))?;
    let labels: Vec<String> = manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if labels.is_empty() {
        return Err(CorpusError::MalformedAnnotation {
            locus: manifest_path.display().to_string(),
            message: "label manifest is empty".into(),
        });
    }

    let mut entries = Vec::new();
    let mut owner: HashMap<String, Split> = HashMap::new();
    for split in Split::ALL {
        let path = root.join("splits").join(format!("{}.csv", split.file_stem()));
        let file = fs::File::open(&path).map_err(|_| CorpusError::MissingManifest(path.clone()))?;
        let mut reader = csv::Reader::from_reader(file);
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            // header is line 1
            let locus = format!("{}:{}", path.display(), i + 2);
            let row = row.map_err(|e| CorpusError::MalformedAnnotation {
                locus: locus.clone(),
                message: e.to_string(),
            })?;
            if !labels.contains(&row.label) {
                return Err(CorpusError::UnknownLabel {
                    label: row.label,
                    locus,
                });
            }
            if let Some(&first) = owner.get(&row.image) {
                if first != split {
                    return Err(CorpusError::OverlappingSplits {
                        image: row.image,
                        first,
                        second: split,
                    });
                }
                return Err(CorpusError::MalformedAnnotation {
                    locus,
                    message: format!("image {} listed twice", row.image),
                });
            }
            if !root.join(&row.image).is_file() {
                return Err(CorpusError::MissingImage(row.image));
            }
            owner.insert(row.image.clone(), split);
            entries.push(EmotionDatasetEntry {
                image_ref: row.image,
                label: row.label,
                split,
            });
        }
    }
    Ok(EmotionDataset { labels, entries })
}
