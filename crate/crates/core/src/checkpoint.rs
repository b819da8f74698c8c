//! Model checkpoints: a directory holding `manifest.txt` (model
//! configuration), `graph.edges` and one tensor dump per named parameter.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{parse_edge_list, FacialGraph};
use crate::models::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.txt";
const EDGES: &str = "graph.edges";
const FORMAT: &str = "painlarks-checkpoint 1";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, graph: &FacialGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("# {FORMAT}\nnum_nodes = {}\n", graph.num_nodes());
    for (k, v) in model.config().to_pairs() {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    manifest.push_str("# parameters\n");
    for (name, t) in model.params().iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("# {name} [{}]\n", shape.join(",")));
    }
    write(&dir.join(MANIFEST), &manifest)?;
    write(&dir.join(EDGES), &graph.to_edge_list())?;
    for (name, t) in model.params().iter() {
        write(&dir.join(format!("{name}.tensor")), &t.to_dump())?;
    }
    Ok(())
}

/// Rebuilds the model described by the manifest and loads every parameter
/// by name. Missing or misshapen parameters are data errors.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, FacialGraph)> {
    let manifest_path = dir.join(MANIFEST);
    let text = read(&manifest_path)?;
    if !text.starts_with(&format!("# {FORMAT}")) {
        return Err(Error::Data(format!("{} is not a painlarks checkpoint", dir.display())));
    }
    let mut num_nodes = None;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: manifest_path.clone(),
            line: lineno + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "num_nodes" {
            num_nodes = Some(v.parse::<usize>().map_err(|e| Error::Parse {
                path: manifest_path.clone(),
                line: lineno + 1,
                message: format!("bad num_nodes `{v}`: {e}"),
            })?);
        } else {
            pairs.push((k.to_string(), v.to_string()));
        }
    }
    let num_nodes = num_nodes.ok_or_else(|| Error::Data(format!("{} lacks num_nodes", manifest_path.display())))?;
    let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let edges_path = dir.join(EDGES);
    let edges = parse_edge_list(&read(&edges_path)?, &edges_path)?;
    let graph = FacialGraph::from_edges(num_nodes, &edges)?;

    let mut model = Model::<T>::new(config, &graph, 0)?;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let path = dir.join(format!("{name}.tensor"));
        let t: Tensor<T> = Tensor::from_dump(&read(&path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let expect = model.params().get(id).shape().to_vec();
        if t.shape() != expect.as_slice() {
            return Err(Error::Data(format!(
                "{}: parameter {name} has shape {:?}, model expects {expect:?}",
                path.display(),
                t.shape()
            )));
        }
        model.params_mut().set(id, t.data())?;
    }
    Ok((model, graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_facial_adjacency;
    use crate::models::ModelKind;

    #[test]
    fn round_trip_preserves_logits() {
        let g = build_facial_adjacency();
        let mut cfg = ModelConfig::with_kind(ModelKind::StgcnLstm).with_widths(&[2, 3, 3]);
        cfg.lstm_hidden = 4;
        cfg.frames = 4;
        let model = Model::<f64>::new(cfg, &g, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &g, dir.path()).unwrap();
        let (back, g2) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(g2.edges(), g.edges());
        assert_eq!(back.config(), model.config());
        let x = Tensor::from_f64(&[4, 68, 2], &(0..544).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        assert_eq!(back.logits(&x).unwrap(), model.logits(&x).unwrap());
    }

    #[test]
    fn missing_parameter_is_a_data_error() {
        let g = build_facial_adjacency();
        let cfg = ModelConfig::with_kind(ModelKind::Stgcn).with_widths(&[2, 3]);
        let model = Model::<f64>::new(cfg, &g, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &g, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("head.weight.tensor")).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
