//! Embedding table: one fixed-dimension row per volume id, with a binary
//! file format (JSON header + raw little-endian f32 rows).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ContrastiveError;

const TABLE_MAGIC: [u8; 4] = *b"EMB1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableHeader {
    checkpoint_id: String,
    dim: usize,
    count: usize,
    ids: Vec<String>,
}

/// Rows are stored in insertion order (manifest order for pipeline tables).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub checkpoint_id: String,
    pub dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(checkpoint_id: impl Into<String>, dim: usize) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f64]) -> Result<(), ContrastiveError> {
        if row.len() != self.dim {
            return Err(ContrastiveError::Dimension(format!(
                "row has {} components, table dim is {}",
                row.len(),
                self.dim
            )));
        }
        self.ids.push(id.into());
        // quantize to f32 so in-memory values match the file format
        self.data.extend(row.iter().map(|&v| v as f32 as f64));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.row(i)))
    }

    pub fn save(&self, path: &Path) -> Result<(), ContrastiveError> {
        let header = TableHeader {
            checkpoint_id: self.checkpoint_id.clone(),
            dim: self.dim,
            count: self.ids.len(),
            ids: self.ids.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&TABLE_MAGIC)?;
        out.write_all(&(header_json.len() as u32).to_le_bytes())?;
        out.write_all(&header_json)?;
        for &v in &self.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContrastiveError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != TABLE_MAGIC {
            return Err(ContrastiveError::Format(format!(
                "bad embedding table magic {magic:?}"
            )));
        }
        let mut len_bytes = [0u8; 4];
        input.read_exact(&mut len_bytes)?;
        let mut header_json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        input.read_exact(&mut header_json)?;
        let header: TableHeader = serde_json::from_slice(&header_json)?;
        if header.ids.len() != header.count {
            return Err(ContrastiveError::Format(format!(
                "header count {} does not match {} ids",
                header.count,
                header.ids.len()
            )));
        }
        let mut payload = vec![0u8; header.count * header.dim * 4];
        input
            .read_exact(&mut payload)
            .map_err(|_| ContrastiveError::Format("truncated embedding table payload".into()))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            checkpoint_id: header.checkpoint_id,
            dim: header.dim,
            ids: header.ids,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut t = EmbeddingTable::new("ckpt-1", 4);
        t.push("a", &[0.125, -1.5, 3.25, 0.0]).unwrap();
        t.push("b", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.emb");
        t.save(&p).unwrap();
        let loaded = EmbeddingTable::load(&p).unwrap();
        assert_eq!(t, loaded);
        loaded.save(&dir.path().join("t2.emb")).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir.path().join("t2.emb")).unwrap()
        );
    }

    #[test]
    fn wrong_dim_rejected() {
        let mut t = EmbeddingTable::new("c", 3);
        assert!(t.push("a", &[1.0, 2.0]).is_err());
    }
}
