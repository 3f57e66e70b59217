//! CSV artifacts. Floats are written with Rust's shortest round-trip formatting,
//! so reading a file back reproduces the exact values.

use std::io::{Read, Write};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use mmfqkd_core::analysis::LinkObservables;
use mmfqkd_core::channel::LaunchKind;
use mmfqkd_core::domain::{Basis, IntensityClass};
use mmfqkd_core::experiment::{SkrRow, StabilityPoint};

pub const OBSERVABLES_HEADER: [&str; 8] = ["distance_km", "basis", "launch", "intensity", "trial", "qber", "gain", "loss_db"];
pub const SKR_HEADER: [&str; 11] =
    ["distance_km", "launch", "equivalent_loss_db", "p_z", "p_signal", "p_decoy", "p_vacuum", "y1", "e1", "skr_bps", "decoy_from_model"];
pub const STABILITY_HEADER: [&str; 5] = ["time_s", "basis", "qber", "gain", "modulation"];

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_observables<W: Write>(w: W, rows: &[LinkObservables]) -> anyhow::Result<()> {
    let mut w = writer(w);
    w.write_record(OBSERVABLES_HEADER)?;
    for r in rows {
        w.write_record([
            r.distance_km.to_string(),
            r.basis.to_string(),
            r.launch.to_string(),
            r.intensity.to_string(),
            r.trial.to_string(),
            r.qber.to_string(),
            r.gain.to_string(),
            r.loss_db.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_skr<W: Write>(w: W, rows: &[SkrRow]) -> anyhow::Result<()> {
    let mut w = writer(w);
    w.write_record(SKR_HEADER)?;
    for r in rows {
        w.write_record([
            r.distance_km.to_string(),
            r.launch.to_string(),
            r.equivalent_loss_db.to_string(),
            r.p_z.to_string(),
            r.p_signal.to_string(),
            r.p_decoy.to_string(),
            r.p_vacuum.to_string(),
            r.y1.to_string(),
            r.e1.to_string(),
            r.skr_bps.to_string(),
            r.decoy_from_model.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stability<W: Write>(w: W, points: &[StabilityPoint]) -> anyhow::Result<()> {
    let mut w = writer(w);
    w.write_record(STABILITY_HEADER)?;
    for p in points {
        w.write_record([p.time_s.to_string(), p.basis.to_string(), p.qber.to_string(), p.gain.to_string(), p.modulation.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Header-addressed access to one record, with the file line for error messages.
struct Row<'a> {
    rec: &'a csv::StringRecord,
    cols: &'a [(String, usize)],
    line: u64,
}

impl Row<'_> {
    fn raw(&self, name: &str) -> Option<&str> {
        self.cols.iter().find(|(n, _)| n == name).and_then(|&(_, i)| self.rec.get(i)).map(str::trim)
    }

    fn get<T: FromStr>(&self, name: &str) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(name).ok_or_else(|| anyhow!("line {}: missing column {name}", self.line))?;
        self.parse(name, raw)
    }

    fn opt<T: FromStr>(&self, name: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(name) {
            None | Some("") => Ok(None),
            Some(raw) => self.parse(name, raw).map(Some),
        }
    }

    fn parse<T: FromStr>(&self, name: &str, raw: &str) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        raw.parse().map_err(|e| anyhow!("line {}: bad {name} {raw:?}: {e}", self.line))
    }
}

fn for_each_row<R: Read>(r: R, required: &[&str], mut f: impl FnMut(&Row) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().context("line 1: unreadable header")?.clone();
    let cols: Vec<(String, usize)> = headers.iter().enumerate().map(|(i, h)| (h.to_ascii_lowercase(), i)).collect();
    for name in required {
        if !cols.iter().any(|(n, _)| n == name) {
            bail!("line 1: missing required column {name}");
        }
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("line {line}: {e}")
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        f(&Row { rec: &rec, cols: &cols, line })?;
    }
    Ok(())
}

/// Observables rows. `intensity` defaults to signal, `trial` to 0 and `loss_db` to NaN.
pub fn read_observables<R: Read>(r: R) -> anyhow::Result<Vec<LinkObservables>> {
    let mut out = Vec::new();
    for_each_row(r, &["distance_km", "basis", "launch", "qber", "gain"], |row| {
        let o = LinkObservables {
            distance_km: row.get("distance_km")?,
            basis: row.get::<Basis>("basis")?,
            launch: row.get::<LaunchKind>("launch")?,
            intensity: row.opt::<IntensityClass>("intensity")?.unwrap_or(IntensityClass::Signal),
            trial: row.opt("trial")?.unwrap_or(0),
            qber: row.get("qber")?,
            gain: row.get("gain")?,
            loss_db: row.opt("loss_db")?.unwrap_or(f64::NAN),
        };
        if !(o.distance_km.is_finite() && o.distance_km > 0.0) {
            bail!("line {}: distance_km must be positive", row.line);
        }
        if !(0.0..=1.0).contains(&o.qber) {
            bail!("line {}: qber must lie in [0, 1], got {}", row.line, o.qber);
        }
        if !(o.gain.is_finite() && o.gain >= 0.0) {
            bail!("line {}: gain must be a non-negative number, got {}", row.line, o.gain);
        }
        out.push(o);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_skr<R: Read>(r: R) -> anyhow::Result<Vec<SkrRow>> {
    let mut out = Vec::new();
    for_each_row(r, &SKR_HEADER, |row| {
        out.push(SkrRow {
            distance_km: row.get("distance_km")?,
            launch: row.get("launch")?,
            equivalent_loss_db: row.get("equivalent_loss_db")?,
            p_z: row.get("p_z")?,
            p_signal: row.get("p_signal")?,
            p_decoy: row.get("p_decoy")?,
            p_vacuum: row.get("p_vacuum")?,
            y1: row.get("y1")?,
            e1: row.get("e1")?,
            skr_bps: row.get("skr_bps")?,
            decoy_from_model: row.get("decoy_from_model")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_stability<R: Read>(r: R) -> anyhow::Result<Vec<StabilityPoint>> {
    let mut out = Vec::new();
    for_each_row(r, &STABILITY_HEADER, |row| {
        out.push(StabilityPoint {
            time_s: row.get("time_s")?,
            basis: row.get("basis")?,
            qber: row.get("qber")?,
            gain: row.get("gain")?,
            modulation: row.get("modulation")?,
        });
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(d: f64, q: f64) -> LinkObservables {
        LinkObservables {
            distance_km: d,
            basis: Basis::Z,
            launch: LaunchKind::Adapter,
            intensity: IntensityClass::Decoy,
            trial: 3,
            qber: q,
            gain: 1.0 / 3.0 * 1e-4,
            loss_db: 7.123456789012345,
        }
    }

    #[test]
    fn observables_round_trip_exactly() {
        let rows = vec![row(1.0, 0.1 + 0.2), row(17.0, 1e-7)];
        let mut buf = Vec::new();
        write_observables(&mut buf, &rows).unwrap();
        assert_eq!(read_observables(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn minimal_columns_default() {
        let text = "distance_km,basis,launch,qber,gain\n5,X,underfill,0.03,4e-4\n";
        let r = read_observables(text.as_bytes()).unwrap();
        assert_eq!(r[0].intensity, IntensityClass::Signal);
        assert_eq!(r[0].trial, 0);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "distance_km,basis,launch,qber,gain\n5,X,underfill,0.03,4e-4\n5,Y,underfill,0.03,4e-4\n";
        let e = read_observables(text.as_bytes()).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = read_observables("distance_km,basis,qber,gain\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("launch"), "{e}");
        let e = read_observables("distance_km,basis,launch,qber,gain\n5,X,adapter,1.5,1\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = read_observables("distance_km,basis,launch,qber,gain\n5,X,adapter,0.1\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }
}
