//! CSV output helpers. Floats print through `Display` (shortest round-trip
//! form), so identical runs produce byte-identical files.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::train::EpochRecord;

pub const LOSS_CSV_HEADER: &str = "stage,epoch,mean_loss,accuracy\n";

/// Appends loss-curve rows, creating the file with a header when absent.
/// Accuracy stays blank for stages that do not measure it.
pub fn append_loss_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        f.write_all(LOSS_CSV_HEADER.as_bytes())?;
    }
    let mut buf = String::new();
    for r in records {
        let accuracy = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        buf.push_str(&format!(
            "{},{},{},{}\n",
            r.stage, r.epoch, r.mean_loss, accuracy
        ));
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let records = vec![
            EpochRecord {
                stage: "train".into(),
                epoch: 0,
                mean_loss: 0.5,
                accuracy: Some(0.75),
            },
            EpochRecord {
                stage: "train".into(),
                epoch: 1,
                mean_loss: 0.25,
                accuracy: None,
            },
        ];
        append_loss_csv(&path, &records).unwrap();
        append_loss_csv(&path, &records[..1].to_vec()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "stage,epoch,mean_loss,accuracy");
        assert_eq!(lines[1], "train,0,0.5,0.75");
        assert_eq!(lines[2], "train,1,0.25,");
        assert_eq!(lines[3], "train,0,0.5,0.75");
        assert_eq!(lines.len(), 4);
    }
}
