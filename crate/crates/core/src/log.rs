//! Time-indexed record of a closed-loop run and its CSV form.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One sample of a run. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    /// Desired control before filtering.
    pub u_c: f64,
    /// Applied (filtered) control.
    pub u: f64,
    /// Sensor measurement before the channel.
    pub y_true: f64,
    /// Measurement delivered to the observer.
    pub y_sent: f64,
    pub yhat: f64,
    pub theta: f64,
    pub thetadot: f64,
    pub xhat1: f64,
    pub xhat2: f64,
    pub r: f64,
    pub alarm: u8,
    #[serde(rename = "hS_x")]
    pub hs_x: f64,
    #[serde(rename = "hS_xhat")]
    pub hs_xhat: f64,
    /// Latent margin of the adversary; NaN when no adversary is attached.
    #[serde(rename = "hS_z")]
    pub hs_z: f64,
    pub deactivated: u8,
}

pub const CSV_HEADER: &str =
    "t,u_c,u,y_true,y_sent,yhat,theta,thetadot,xhat1,xhat2,r,alarm,hS_x,hS_xhat,hS_z,deactivated";

/// Logged data `D = {(u_i, y_i, yhat_i)}` plus ground-truth diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataLog {
    pub rows: Vec<LogRow>,
}

impl DataLog {
    pub fn new(rows: Vec<LogRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn u(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.u).collect()
    }

    /// Measurements as seen by the observer.
    pub fn y(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y_sent).collect()
    }

    pub fn yhat(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.yhat).collect()
    }

    /// Observer inputs `w_k = [u_k; y_k]` as a `2 x N` matrix.
    pub fn inputs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2, self.len(), |i, k| if i == 0 { self.rows[k].u } else { self.rows[k].y_sent })
    }

    /// Observer outputs `yhat_k` as a `1 x N` matrix.
    pub fn outputs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(1, self.len(), |_, k| self.rows[k].yhat)
    }

    pub fn alarm_count(&self) -> usize {
        self.rows.iter().filter(|r| r.alarm != 0).count()
    }

    /// Sample period, checking that time is strictly increasing with a
    /// constant step.
    pub fn dt(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: self.len() });
        }
        let dt = self.rows[1].t - self.rows[0].t;
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("time stamps not increasing".into()));
        }
        for w in self.rows.windows(2) {
            let step = w[1].t - w[0].t;
            if !(step > 0.0) || (step - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "non-uniform time step at t = {}",
                    w[1].t
                )));
            }
        }
        Ok(dt)
    }

    /// SHA-256 over the `(u, y, yhat)` triples.
    pub fn data_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.u.to_le_bytes());
            h.update(r.y_sent.to_le_bytes());
            h.update(r.yhat.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(','))?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.join(",") != CSV_HEADER {
            return Err(Error::InvalidParameter(format!(
                "unexpected CSV header: {}",
                header.join(",")
            )));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
