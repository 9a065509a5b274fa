//! CSV and model-file input/output.
//!
//! Floats are written in scientific notation with 17 significant digits so
//! that every value parses back to the same bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hybrid_sim::Trajectory;
use crate::numkernel::Matrix;
use crate::report::RmseReport;
use crate::tde_koopman::KoopmanModel;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad number {s:?} in {what}")))
}

pub fn state_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

pub fn control_names(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("u{i}")).collect()
}

/// `x1..xn` followed by `u1..um`.
pub fn channel_names(n: usize, m: usize) -> Vec<String> {
    let mut names = state_names(n);
    names.extend(control_names(m));
    names
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(File::create(path)?)))
}

/// Header `t,x1..xn,u1..um,event`; `event` holds the guard id on the sample
/// right after a reset.
pub fn write_trajectory<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(channel_names(traj.n(), traj.m()));
    header.push("event".into());
    w.write_record(&header)?;
    for k in 0..traj.len() {
        let mut row = vec![fmt_f64(traj.time(k))];
        row.extend(traj.states[k].iter().chain(&traj.controls[k]).map(|v| fmt_f64(*v)));
        let events: Vec<String> = traj
            .events
            .iter()
            .filter(|(s, _)| *s == k)
            .map(|(_, g)| g.to_string())
            .collect();
        row.push(events.join(";"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_file(path: &Path, traj: &Trajectory) -> Result<()> {
    write_trajectory(BufWriter::new(File::create(path)?), traj)
}

/// Reads a trajectory CSV. `dt` must be given because the grid step is not
/// stored; the time column is checked against it.
pub fn read_trajectory<R: Read>(input: R, dt: f64) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") || header.last().map(String::as_str) != Some("event") {
        return Err(Error::Parse(
            "trajectory header must start with t and end with event".into(),
        ));
    }
    let n = header.iter().filter(|h| h.starts_with('x')).count();
    let m = header.iter().filter(|h| h.starts_with('u')).count();
    if header.len() != n + m + 2 || header[1..header.len() - 1] != channel_names(n, m)[..] {
        return Err(Error::Parse(format!("unexpected trajectory header {header:?}")));
    }
    let mut traj = Trajectory {
        dt,
        t0: 0.0,
        states: Vec::new(),
        controls: Vec::new(),
        events: Vec::new(),
        disturbances: Vec::new(),
    };
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("row {k} has {} fields", rec.len())));
        }
        let t = parse_f64(&rec[0], "t")?;
        if k == 0 {
            traj.t0 = t;
        } else if (traj.time(k) - t).abs() > 1e-9 * dt.max(t.abs()) {
            return Err(Error::Parse(format!("row {k}: time {t} is off the dt = {dt} grid")));
        }
        let vals = (1..=n + m)
            .map(|i| parse_f64(&rec[i], "trajectory"))
            .collect::<Result<Vec<_>>>()?;
        traj.states.push(vals[..n].to_vec());
        traj.controls.push(vals[n..].to_vec());
        let ev = rec[n + m + 1].trim();
        if !ev.is_empty() {
            for g in ev.split(';') {
                let id = g
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad event id {g:?} in row {k}")))?;
                traj.events.push((k, id));
            }
        }
    }
    Ok(traj)
}

pub fn read_trajectory_file(path: &Path, dt: f64) -> Result<Trajectory> {
    read_trajectory(BufReader::new(File::open(path)?), dt)
}

/// Header `t,true_*,pred_*`.
pub fn write_prediction(
    path: &Path,
    times: &[f64],
    names: &[String],
    truth: &[Vec<f64>],
    pred: &[Vec<f64>],
) -> Result<()> {
    if truth.len() != times.len() || pred.len() != times.len() {
        return Err(Error::LengthMismatch {
            left: times.len(),
            right: truth.len().min(pred.len()),
        });
    }
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().map(|c| format!("true_{c}")));
    header.extend(names.iter().map(|c| format!("pred_{c}")));
    w.write_record(&header)?;
    for k in 0..times.len() {
        let mut row = vec![fmt_f64(times[k])];
        row.extend(truth[k].iter().chain(&pred[k]).map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `t,ref_x*,act_x*,u_*`, covering samples `from..` of both runs.
/// Time is measured from sample `from`.
pub fn write_closed_loop(path: &Path, reference: &Trajectory, actual: &Trajectory, from: usize) -> Result<()> {
    let (n, m) = (actual.n(), actual.m());
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(state_names(n).iter().map(|c| format!("ref_{c}")));
    header.extend(state_names(n).iter().map(|c| format!("act_{c}")));
    header.extend((1..=m).map(|j| format!("u_{j}")));
    w.write_record(&header)?;
    for k in from..actual.len().min(reference.len()) {
        let mut row = vec![fmt_f64((k - from) as f64 * actual.dt)];
        row.extend(
            reference.states[k]
                .iter()
                .chain(&actual.states[k])
                .chain(&actual.controls[k])
                .map(|v| fmt_f64(*v)),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `channel,rmse`.
pub fn write_rmse(path: &Path, report: &RmseReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["channel", "rmse"])?;
    for (name, v) in &report.channels {
        w.write_record([name.clone(), fmt_f64(*v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rmse(path: &Path) -> Result<RmseReport> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut channels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse("rmse rows need two fields".into()));
        }
        channels.push((rec[0].to_string(), parse_f64(&rec[1], "rmse")?));
    }
    Ok(RmseReport { channels })
}

/// Header `quantity,value`.
pub fn write_key_values(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["quantity", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec[0].to_string(), rec[1].to_string()))
        })
        .collect()
}

/// One matrix row per CSV line, no header.
pub fn write_matrix(path: &Path, a: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    for i in 0..a.nrows() {
        w.write_record(a.row(i).iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(BufReader::new(File::open(path)?));
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse(format!("matrix row {rows} has {} entries", rec.len())));
        }
        for f in rec.iter() {
            data.push(parse_f64(f, "matrix")?);
        }
        rows += 1;
    }
    crate::numkernel::matrix_from_row_major(rows, cols.unwrap_or(0), &data)
}

const MODEL_MAGIC: &[u8; 4] = b"TDKM";
const MODEL_VERSION: u32 = 1;

/// Binary model: magic `TDKM`, `u32` version, `u64` n, m, N, `f64` dt,
/// `u64` rows and cols, then `L` row-major. All little-endian.
pub fn write_model<W: Write>(mut out: W, model: &KoopmanModel) -> Result<()> {
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    for v in [model.n, model.m, model.delays] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&model.dt.to_le_bytes())?;
    out.write_all(&(model.l.nrows() as u64).to_le_bytes())?;
    out.write_all(&(model.l.ncols() as u64).to_le_bytes())?;
    for i in 0..model.l.nrows() {
        for v in model.l.row(i).iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_model(path: &Path, model: &KoopmanModel) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn read_model<R: Read>(mut input: R) -> Result<KoopmanModel> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Parse("model file too short".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Parse("not a model file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let truncated = |_| Error::Parse("model file truncated".into());
    input.read_exact(&mut b4).map_err(truncated)?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(Error::Parse(format!("unsupported model version {version}")));
    }
    let mut next_u64 = |input: &mut R| -> Result<usize> {
        input.read_exact(&mut b8).map_err(truncated)?;
        usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Parse("dimension overflow".into()))
    };
    let n = next_u64(&mut input)?;
    let m = next_u64(&mut input)?;
    let delays = next_u64(&mut input)?;
    let mut bd = [0u8; 8];
    input.read_exact(&mut bd).map_err(truncated)?;
    let dt = f64::from_le_bytes(bd);
    let rows = next_u64(&mut input)?;
    let cols = next_u64(&mut input)?;
    let side = KoopmanModel::side(n, m, delays);
    if rows != side || cols != side {
        return Err(Error::Parse(format!(
            "model header says {rows}x{cols} but n={n}, m={m}, N={delays} need {side}x{side}"
        )));
    }
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        input.read_exact(&mut bd).map_err(truncated)?;
        *v = f64::from_le_bytes(bd);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Parse("trailing bytes after model data".into()));
    }
    let l = crate::numkernel::matrix_from_row_major(rows, cols, &data)?;
    KoopmanModel::from_l(n, m, delays, dt, l)
}

pub fn load_model(path: &Path) -> Result<KoopmanModel> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open model {}: {e}", path.display())))?;
    read_model(BufReader::new(file))
}
