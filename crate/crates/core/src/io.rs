//! CSV input and output.
//!
//! Observations are read and written in long format (`id,time,y,observed`
//! plus one column per per-individual constant); covariates as a headed
//! matrix `x1..xp`. Floats are written in shortest round-trip form, so
//! identical values always give identical bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{CovariateLevel, Dataset, Individual, Layout, ParameterVector};
use crate::optimizer::FitResult;
use crate::regpath::PathResult;

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Writes `data.csv` style observations.
pub fn write_observations(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["id".to_string(), "time".into(), "y".into(), "observed".into()];
    header.extend(data.constant_names().iter().cloned());
    w.write_record(&header)?;
    for (i, ind) in data.individuals().iter().enumerate() {
        for j in 0..ind.n_obs() {
            let mut rec = vec![
                (i + 1).to_string(),
                fmt(ind.times[j]),
                fmt(ind.y[j]),
                if ind.observed[j] { "1".into() } else { "0".into() },
            ];
            rec.extend(ind.constants.iter().map(|&c| fmt(c)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_covariates(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let header: Vec<String> = (1..=x.ncols()).map(|l| format!("x{l}")).collect();
    w.write_record(&header)?;
    for r in 0..x.nrows() {
        w.write_record(x.row(r).iter().map(|&v| fmt(v)))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse {what} `{s}`")))
}

/// Reads observations and covariates. Constant columns present in the
/// observation file take precedence; otherwise `constants` supplies
/// `(name, value)` pairs shared by every individual.
pub fn read_dataset(
    observations: &Path,
    covariates: &Path,
    level: CovariateLevel,
    constant_names: &[&str],
    constants: &HashMap<String, f64>,
) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(observations)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(c_id), Some(c_time), Some(c_y)) = (col("id"), col("time"), col("y")) else {
        return Err(Error::InvalidInput(format!(
            "{}: expected columns id,time,y[,observed]",
            observations.display()
        )));
    };
    let c_obs = col("observed");
    let c_const: Vec<Option<usize>> = constant_names.iter().map(|n| col(n)).collect();
    let mut shared = Vec::with_capacity(constant_names.len());
    for (name, c) in constant_names.iter().zip(&c_const) {
        if c.is_none() {
            match constants.get(*name) {
                Some(&v) => shared.push(v),
                None => return Err(Error::InvalidInput(format!("constant `{name}` not provided"))),
            }
        } else {
            shared.push(f64::NAN);
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut individuals: Vec<Individual> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let id = rec.get(c_id).unwrap_or("").trim().to_string();
        let observed = match c_obs.and_then(|c| rec.get(c)) {
            None => true,
            Some(s) => match s.trim() {
                "1" | "true" | "TRUE" => true,
                "0" | "false" | "FALSE" => false,
                other => return Err(Error::InvalidInput(format!("line {line}: bad observed flag `{other}`"))),
            },
        };
        let time = parse_f64(rec.get(c_time).unwrap_or(""), "time", line)?;
        let y_raw = rec.get(c_y).unwrap_or("").trim();
        let y = if y_raw.is_empty() && !observed {
            f64::NAN
        } else {
            parse_f64(y_raw, "y", line)?
        };
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            let mut ind = Individual::new(Vec::new(), Vec::new());
            ind.constants = shared.clone();
            individuals.push(ind);
            individuals.len() - 1
        });
        let ind = &mut individuals[slot];
        for (k, c) in c_const.iter().enumerate() {
            if let Some(c) = c {
                ind.constants[k] = parse_f64(rec.get(*c).unwrap_or(""), constant_names[k], line)?;
            }
        }
        ind.times.push(time);
        ind.y.push(y);
        ind.observed.push(observed);
    }
    let x = read_matrix(covariates)?;
    Dataset::new(
        individuals,
        x,
        level,
        constant_names.iter().map(|s| s.to_string()).collect(),
    )
}

/// Reads a headed numeric matrix.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let p = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != p {
            return Err(Error::InvalidInput(format!(
                "{}: line {} has {} fields, expected {p}",
                path.display(),
                line + 2,
                rec.len()
            )));
        }
        for field in rec.iter() {
            values.push(parse_f64(field, "covariate", line + 2)?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, p, &values))
}

/// `coord,value` with variances on their natural scale.
pub fn write_parameters(path: &Path, theta: &ParameterVector) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["coord", "value"])?;
    for (name, v) in theta.named_values() {
        w.write_record([name, fmt(v)])?;
    }
    w.flush()?;
    Ok(())
}

/// `iter,coord_name,value`.
pub fn write_trajectory(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "coord_name", "value"])?;
    for (k, name, v) in fit.trajectory_rows() {
        w.write_record([k.to_string(), name, fmt(v)])?;
    }
    w.flush()?;
    Ok(())
}

fn beta_name(layout: &Layout, offset: usize) -> String {
    layout.coord_name(layout.beta_range().start + offset)
}

/// `lambda,coord,value` for every penalized coefficient at every level.
pub fn write_path_beta(path: &Path, result: &PathResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["lambda", "coord", "value"])?;
    for rec in &result.records {
        let layout = rec.theta_pen.layout();
        let p = layout.n_covariates;
        for r in 0..layout.beta_rows {
            for c in 0..p {
                w.write_record([fmt(rec.lambda), beta_name(&layout, r * p + c), fmt(rec.theta_pen.beta[(r, c)])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `lambda,ebic,support_size,mc_loglik,mc_std_error`.
pub fn write_path_ebic(path: &Path, result: &PathResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["lambda", "ebic", "support_size", "mc_loglik", "mc_std_error"])?;
    for rec in &result.records {
        w.write_record([
            fmt(rec.lambda),
            fmt(rec.ebic),
            rec.support.len().to_string(),
            fmt(rec.mc_loglik),
            fmt(rec.mc_std_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `key,value` rows: the selected level, its support and the refit parameters.
pub fn write_selected(path: &Path, result: &PathResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["key", "value"])?;
    w.write_record(["lambda_hat".to_string(), fmt(result.lambda_hat)])?;
    let layout = result.theta_final.layout();
    let names: Vec<String> = result.support_final.iter().map(|&s| beta_name(&layout, s)).collect();
    w.write_record(["support".to_string(), names.join(";")])?;
    w.write_record(["support_size".to_string(), result.support_final.len().to_string()])?;
    for (name, v) in result.theta_final.named_values() {
        w.write_record([name, fmt(v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes free text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
