//! Node and subgraph accuracy.

use crate::error::{Error, Result};
use crate::graph::{Adjacency, ClassId};

fn check_inputs(pred: &[ClassId], truth: &[Option<ClassId>], idx: &[u32]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty node set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    for &i in idx {
        match truth.get(i as usize) {
            None => return Err(Error::InvalidArgument(format!("node {i} out of range"))),
            Some(None) => return Err(Error::InvalidArgument(format!("node {i} has no ground-truth label"))),
            Some(Some(_)) => {}
        }
    }
    Ok(())
}

fn correct(pred: &[ClassId], truth: &[Option<ClassId>], i: usize) -> bool {
    truth[i] == Some(pred[i])
}

/// Fraction of `idx` predicted correctly.
pub fn node_accuracy(pred: &[ClassId], truth: &[Option<ClassId>], idx: &[u32]) -> Result<f64> {
    check_inputs(pred, truth, idx)?;
    let hits = idx.iter().filter(|&&i| correct(pred, truth, i as usize)).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Fraction of `idx` whose own prediction and every neighbor's prediction are
/// correct. Isolated nodes count by their own correctness; neighbors without
/// a ground-truth label impose no constraint.
pub fn subgraph_accuracy(pred: &[ClassId], truth: &[Option<ClassId>], adj: &Adjacency, idx: &[u32]) -> Result<f64> {
    check_inputs(pred, truth, idx)?;
    if adj.num_nodes() != pred.len() {
        return Err(Error::shape(
            "subgraph_accuracy",
            "adjacency size differs from prediction count",
        ));
    }
    let hits = idx
        .iter()
        .filter(|&&i| {
            let i = i as usize;
            correct(pred, truth, i)
                && adj
                    .neighbors(i)
                    .iter()
                    .all(|&j| truth[j as usize].is_none() || correct(pred, truth, j as usize))
        })
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(v: &[usize]) -> Vec<Option<usize>> {
        v.iter().map(|&c| Some(c)).collect()
    }

    #[test]
    fn node_accuracy_counts() {
        let t = truth(&[0, 1, 2]);
        assert_eq!(node_accuracy(&[0, 1, 2], &t, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(node_accuracy(&[1, 2, 0], &t, &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(node_accuracy(&[0, 1, 0], &t, &[0, 1, 2]).unwrap(), 2.0 / 3.0);
        assert!(node_accuracy(&[0, 1, 0], &t, &[]).is_err());
    }

    #[test]
    fn triangle_with_one_wrong_node() {
        let adj = Adjacency::from_undirected(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        let t = truth(&[0, 0, 1]);
        let pred = [0, 0, 0];
        assert_eq!(node_accuracy(&pred, &t, &[0, 1, 2]).unwrap(), 2.0 / 3.0);
        assert_eq!(subgraph_accuracy(&pred, &t, &adj, &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn star_with_wrong_center() {
        let adj = Adjacency::from_undirected(5, [(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let t = truth(&[1, 0, 0, 0, 0]);
        let pred = [0, 0, 0, 0, 0];
        assert_eq!(subgraph_accuracy(&pred, &t, &adj, &[0, 1, 2, 3, 4]).unwrap(), 0.0);
    }

    #[test]
    fn isolated_node_counts_by_itself() {
        let adj = Adjacency::from_undirected(2, []).unwrap();
        let t = truth(&[0, 1]);
        assert_eq!(subgraph_accuracy(&[0, 0], &t, &adj, &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_seed_std_is_zero() {
        assert_eq!(mean_std(&[0.8]), (0.8, 0.0));
    }
}
