//! Era prediction for a whole painting by majority vote over multi-scale
//! random crops.

use std::io::Write;
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::corpus::{sample_crops, CropSpec, EraLabel, LabeledImage};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteMode {
    Multiclass,
    Binary(EraLabel, EraLabel),
}

impl VoteMode {
    pub fn name(&self) -> &'static str {
        match self {
            VoteMode::Multiclass => "multiclass",
            VoteMode::Binary(..) => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    pub votes: Vec<usize>,
    pub total: usize,
    pub winner: usize,
    pub mode: VoteMode,
}

impl VoteTally {
    pub fn winner_era(&self) -> Option<EraLabel> {
        EraLabel::from_index(self.winner)
    }
}

/// Counts each label and picks the most voted, lowest index on ties.
pub fn vote(predictions: &[usize], num_classes: usize) -> Result<VoteTally> {
    if predictions.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let mut votes = vec![0usize; num_classes];
    for &p in predictions {
        if p >= num_classes {
            return Err(Error::InvalidArgument(format!("prediction {p} outside {num_classes} classes")));
        }
        votes[p] += 1;
    }
    let mut winner = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = i;
        }
    }
    Ok(VoteTally {
        votes,
        total: predictions.len(),
        winner,
        mode: VoteMode::Multiclass,
    })
}

/// Anything that can label crops with era indices. In binary mode the
/// returned labels must be one of the pair.
pub trait CropClassifier {
    /// Side length crops are resized to before classification.
    fn sample_side(&self) -> usize;
    fn classify(&self, crops: &[RgbImage], mode: VoteMode) -> Result<Vec<usize>>;
}

/// Draws 100 crops (scales 0.8 to 1.2, 20 each), classifies them and votes.
pub fn date_painting(img: &LabeledImage, classifier: &dyn CropClassifier, mode: VoteMode, seed: u64) -> Result<VoteTally> {
    let spec = CropSpec::voting(classifier.sample_side(), seed);
    let crops = sample_crops(&img.pixels, &spec)?;
    let predictions = classifier.classify(&crops, mode)?;
    if let VoteMode::Binary(a, b) = mode {
        if let Some(&p) = predictions.iter().find(|&&p| p != a.index() && p != b.index()) {
            return Err(Error::InvalidArgument(format!("binary classifier returned era {p} outside its pair")));
        }
    }
    let mut tally = vote(&predictions, EraLabel::COUNT)?;
    tally.mode = mode;
    Ok(tally)
}

/// Per-painting JSON report: `{id, mode, votes: {era: count}, winner, pair?}`.
#[derive(Debug, Clone, Serialize)]
pub struct DatingReport {
    pub id: String,
    pub mode: &'static str,
    pub votes: EraVotes,
    pub winner: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<[String; 2]>,
}

/// Vote counts serialized as a map in era order.
#[derive(Debug, Clone)]
pub struct EraVotes(pub Vec<(EraLabel, usize)>);

impl Serialize for EraVotes {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (era, count) in &self.0 {
            map.serialize_entry(era.name(), count)?;
        }
        map.end()
    }
}

impl DatingReport {
    pub fn new(id: impl Into<String>, tally: &VoteTally) -> Self {
        Self {
            id: id.into(),
            mode: tally.mode.name(),
            votes: EraVotes(EraLabel::ALL.iter().map(|&e| (e, tally.votes[e.index()])).collect()),
            winner: tally.winner_era().map_or_else(|| tally.winner.to_string(), |e| e.name().to_string()),
            pair: match tally.mode {
                VoteMode::Binary(a, b) => Some([a.name().to_string(), b.name().to_string()]),
                VoteMode::Multiclass => None,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Two-column `era count` data for histogram plots.
pub fn write_gnuplot(tally: &VoteTally, mut w: impl Write) -> Result<()> {
    writeln!(w, "# era count")?;
    for era in EraLabel::ALL {
        writeln!(w, "{} {}", era.name(), tally.votes[era.index()])?;
    }
    Ok(())
}

pub fn save_report(report: &DatingReport, tally: &VoteTally, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.json")), report.to_json()? + "\n")?;
    let mut f = std::fs::File::create(dir.join(format!("{stem}.dat")))?;
    write_gnuplot(tally, &mut f)
}
