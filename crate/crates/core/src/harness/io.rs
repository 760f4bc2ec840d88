//! Dataset CSVs (`env,y,x1..xd[,z1..zk]`) and their JSON manifests.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CirrlError, Result};
use crate::scm_gen::{EnvData, GenConfig, InterventionMoments, MultiEnvDataset, NoiseFamily, ScmSystem, TestEnv};
use crate::tensor_nn::DenseMatrix;

fn header(d: usize, k: Option<usize>) -> Vec<String> {
    let mut h = vec!["env".to_string(), "y".to_string()];
    h.extend((1..=d).map(|j| format!("x{j}")));
    if let Some(k) = k {
        h.extend((1..=k).map(|j| format!("z{j}")));
    }
    h
}

fn write_rows<W: Write>(w: &mut csv::Writer<W>, label: usize, x: &DenseMatrix, y: &[f64], z: Option<&DenseMatrix>) -> Result<()> {
    for i in 0..y.len() {
        let mut rec = Vec::with_capacity(2 + x.cols() + z.map_or(0, |z| z.cols()));
        rec.push(label.to_string());
        rec.push(y[i].to_string());
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        if let Some(z) = z {
            rec.extend(z.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    Ok(())
}

/// Writes all environments in label order. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_dataset_csv<W: Write>(data: &MultiEnvDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(data.d(), data.latent_dim()))?;
    for e in data.envs() {
        write_rows(&mut w, e.label, &e.x, &e.y, e.z_true.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a test environment under a single label.
pub fn write_test_csv<W: Write>(test: &TestEnv, label: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(test.x.cols(), test.z_true.as_ref().map(|z| z.cols())))?;
    write_rows(&mut w, label, &test.x, &test.y, test.z_true.as_ref())?;
    w.flush()?;
    Ok(())
}

/// Rows grouped by environment label.
pub struct ParsedCsv {
    pub d: usize,
    pub k: Option<usize>,
    pub groups: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn parse_header(fields: &csv::StringRecord) -> Result<(usize, Option<usize>)> {
    let bad = |m: String| CirrlError::Parse { line: 1, message: m };
    let cols: Vec<&str> = fields.iter().collect();
    if cols.len() < 3 || cols[0] != "env" || cols[1] != "y" {
        return Err(bad("header must start with env,y,x1".into()));
    }
    let mut d = 0;
    while 2 + d < cols.len() && cols[2 + d] == format!("x{}", d + 1) {
        d += 1;
    }
    if d == 0 {
        return Err(bad("header has no x columns".into()));
    }
    let rest = &cols[2 + d..];
    for (j, c) in rest.iter().enumerate() {
        if *c != format!("z{}", j + 1) {
            return Err(bad(format!("unexpected column {c:?}")));
        }
    }
    Ok((d, (!rest.is_empty()).then_some(rest.len())))
}

pub fn parse_csv<R: Read>(input: R) -> Result<ParsedCsv> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = reader.records();
    let head = records.next().ok_or(CirrlError::Parse {
        line: 1,
        message: "empty file".into(),
    })??;
    let (d, k) = parse_header(&head)?;
    let width = 2 + d + k.unwrap_or(0);
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CirrlError::Parse { line, message: e.to_string() })?;
        if rec.len() != width {
            return Err(CirrlError::Parse {
                line,
                message: format!("expected {width} fields, got {}", rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| CirrlError::Parse {
            line,
            message: format!("environment label {:?} is not a non-negative integer", &rec[0]),
        })?;
        let mut nums = Vec::with_capacity(width - 1);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| CirrlError::Parse {
                line,
                message: format!("column {} value {cell:?} is not a number", j + 1),
            })?;
            nums.push(v);
        }
        let g = groups.entry(label).or_default();
        g.0.push(nums[0]);
        g.1.extend_from_slice(&nums[1..1 + d]);
        g.2.extend_from_slice(&nums[1 + d..]);
    }
    Ok(ParsedCsv { d, k, groups })
}

/// Loads a multi-environment training CSV; environment 0 must be present.
pub fn load_csv_dataset(path: &Path) -> Result<MultiEnvDataset> {
    let parsed = parse_csv(std::fs::File::open(path)?)?;
    if !parsed.groups.contains_key(&0) {
        return Err(CirrlError::Contract(format!("{}: reference environment 0 is missing", path.display())));
    }
    dataset_from_parsed(parsed)
}

pub fn dataset_from_parsed(parsed: ParsedCsv) -> Result<MultiEnvDataset> {
    let ParsedCsv { d, k, groups } = parsed;
    let envs = groups
        .into_iter()
        .map(|(label, (y, x, z))| {
            let n = y.len();
            Ok(EnvData {
                label,
                x: DenseMatrix::new(n, d, x)?,
                y,
                z_true: k.map(|k| DenseMatrix::new(n, k, z)).transpose()?,
                shocks: None,
                moments: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MultiEnvDataset::new(envs)
}

/// Loads a single-environment test CSV.
pub fn load_test_csv(path: &Path, eta: f64, family: NoiseFamily) -> Result<TestEnv> {
    let parsed = parse_csv(std::fs::File::open(path)?)?;
    if parsed.groups.len() != 1 {
        return Err(CirrlError::Data(format!(
            "{}: a test file holds one environment, found {}",
            path.display(),
            parsed.groups.len()
        )));
    }
    let (d, k) = (parsed.d, parsed.k);
    let (_, (y, x, z)) = parsed.groups.into_iter().next().expect("one group");
    let n = y.len();
    let dim = k.map_or(0, |k| k + 1);
    Ok(TestEnv {
        eta,
        family,
        x: DenseMatrix::new(n, d, x)?,
        y,
        z_true: k.map(|k| DenseMatrix::new(n, k, z)).transpose()?,
        shocks: None,
        v_mean: vec![0.0; dim],
        v_second_moment: DenseMatrix::zeros(dim, dim),
        chi2_dof: None,
    })
}

/// Perturbation metadata of one generated test file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestManifest {
    pub file: String,
    pub label: usize,
    pub eta: f64,
    pub family: NoiseFamily,
    pub xi_eta: DenseMatrix,
    pub v_mean: Vec<f64>,
    pub chi2_dof: Option<u32>,
}

impl TestManifest {
    pub fn from_env(file: &str, label: usize, test: &TestEnv) -> Self {
        Self {
            file: file.to_string(),
            label,
            eta: test.eta,
            family: test.family,
            xi_eta: test.v_second_moment.clone(),
            v_mean: test.v_mean.clone(),
            chi2_dof: test.chi2_dof,
        }
    }
}

/// Everything needed to rebuild the generating system of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: GenConfig,
    pub seed: u64,
    /// `B`, row = child, column = parent.
    pub adjacency: DenseMatrix,
    pub intervention_moments: Vec<InterventionMoments>,
    pub system: ScmSystem,
    pub tests: Vec<TestManifest>,
}

impl DatasetManifest {
    pub fn new(config: &GenConfig, system: &ScmSystem) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            adjacency: system.adjacency.clone(),
            intervention_moments: system.env_moments(),
            system: system.clone(),
            tests: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm_gen::{generate_test, generate_train};

    fn small() -> GenConfig {
        GenConfig {
            n_per_env: 20,
            num_envs: 3,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generated_dataset_round_trips_bit_exactly() {
        let (_, data) = generate_train(&small()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let back = dataset_from_parsed(parse_csv(buf.as_slice()).unwrap()).unwrap();
        for (a, b) in data.envs().iter().zip(back.envs()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
            assert_eq!(a.z_true, b.z_true);
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("env,y,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,z1,z2\n"));
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn small_file_shapes() {
        let text = "env,y,x1,x2,x3\n0,1,2,3,4\n1,1.5,2,3,4\n0,-1,0,0,1e-3\n";
        let data = dataset_from_parsed(parse_csv(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(data.d(), 3);
        assert_eq!(data.num_envs(), 2);
        assert_eq!(data.latent_dim(), None);
        assert_eq!(data.envs()[0].y, vec![1.0, -1.0]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let mut text = String::from("env,y,x1\n");
        for i in 0..15 {
            text.push_str(&format!("0,{i},1\n"));
        }
        text.push_str("1,abc,2\n");
        match parse_csv(text.as_bytes()) {
            Err(CirrlError::Parse { line, .. }) => assert_eq!(line, 17),
            other => panic!("expected parse error, got {:?}", other.err()),
        }
        assert!(matches!(parse_csv("env,x1,y\n".as_bytes()), Err(CirrlError::Parse { line: 1, .. })));
        assert!(matches!(parse_csv("env,y,x1\n0,1\n".as_bytes()), Err(CirrlError::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_reference_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "env,y,x1\n1,0,0\n2,0,0\n").unwrap();
        assert!(matches!(load_csv_dataset(&path), Err(CirrlError::Contract(_))));
    }

    #[test]
    fn test_file_round_trip_and_manifest() {
        let cfg = GenConfig { eta: 0.0, ..small() };
        let (sys, _) = generate_train(&cfg).unwrap();
        let test = generate_test(&sys, &cfg, 30).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_test_csv(&test, 3, std::fs::File::create(&path).unwrap()).unwrap();
        let back = load_test_csv(&path, 0.0, NoiseFamily::Gaussian).unwrap();
        assert_eq!(back.x, test.x);
        assert_eq!(back.y, test.y);
        let mut manifest = DatasetManifest::new(&cfg, &sys);
        manifest.tests.push(TestManifest::from_env("t.csv", 3, &test));
        assert!(manifest.tests[0].xi_eta.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(DatasetManifest::from_json(&manifest.to_json().unwrap()).unwrap(), manifest);
    }
}
