use std::fs;

use mole::data::{
    import_planetoid, import_tu, load_idx, load_multigraph, load_nodegraph, read_csv_records, split,
    synth_generate, write_idx_images, write_idx_labels, write_multigraph, write_nodegraph, Dataset, Features,
    NodegraphPaths, SynthKind, SynthParams,
};
use mole::error::Error;

const HEADER: &str = "age,workclass,fnlwgt,education,education-num,marital-status,occupation,relationship,race,sex,capital-gain,capital-loss,hours-per-week,native-country,salary\n";

#[test]
fn adult_rows_with_null_markers_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adult.csv");
    let body = format!(
        "{HEADER}39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n\
         50, ?, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K\n\
         38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, >50K\n"
    );
    fs::write(&path, body).unwrap();
    let recs = read_csv_records(&path).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].label, 1);
    assert_eq!(read_csv_records(&path).unwrap(), recs);
}

#[test]
fn all_zero_idx_gives_zero_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    fs::write(&img, write_idx_images(4, 28, 28, &[0; 4 * 28 * 28])).unwrap();
    fs::write(&lab, write_idx_labels(&[0, 1, 2, 3])).unwrap();
    let d = load_idx(&img, &lab).unwrap();
    let Features::Dense(x) = &d.features else { panic!() };
    assert_eq!(x.shape(), &[4, 1, 28, 28]);
    assert!(x.data().iter().all(|&v| v == 0.0));
    assert_eq!(d.labels, vec![0, 1, 2, 3]);
    assert_eq!(load_idx(&img, &lab).unwrap().provenance, d.provenance);
}

#[test]
fn truncated_idx_is_a_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    let bytes = write_idx_images(4, 28, 28, &[0; 4 * 28 * 28]);
    fs::write(&img, &bytes[..bytes.len() - 100]).unwrap();
    fs::write(&lab, write_idx_labels(&[0, 1, 2, 3])).unwrap();
    let err = load_idx(&img, &lab).unwrap_err();
    assert!(err.to_string().contains("length mismatch"), "{err}");
    fs::write(&img, &bytes).unwrap();
    fs::write(&lab, write_idx_labels(&[0, 1, 2])).unwrap();
    assert!(load_idx(&img, &lab).is_err());
}

#[test]
fn multigraph_file_loads_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.jsonl");
    let mut body = String::new();
    for i in 0..10 {
        body.push_str(&format!("{{\"nodes\":[{}],\"edges\":[],\"label\":{}}}\n", i % 14, i % 2));
    }
    body.push_str("{\"nodes\":[0,1,2],\"edges\":[[0,1],[1,2]],\"label\":1}\n");
    body.push_str("{\"nodes\":[0,1,2],\"edges\":[[0,1]],\"label\":0}\n");
    fs::write(&path, &body).unwrap();
    let d = load_multigraph(&path).unwrap();
    assert_eq!((d.len(), d.class_count), (12, 2));
    let Features::Graphs(gs) = &d.features else { panic!() };
    assert_eq!(gs[0].num_nodes(), 1);
    assert_eq!(gs[0].normalized_adjacency().to_dense().data(), &[1.0]);
    assert_eq!(gs[0].feature_dim(), 14);
    assert_eq!(load_multigraph(&path).unwrap().provenance.digest, d.provenance.digest);

    fs::write(&path, body.replace("[[0,1],[1,2]]", "[[0,5]]")).unwrap();
    let err = load_multigraph(&path).unwrap_err();
    assert!(matches!(err, Error::Parse { line: Some(11), .. }), "{err}");
    assert!(err.to_string().contains("out of range"), "{err}");
}

fn same_nodegraph(a: &Dataset, b: &Dataset) {
    let (Features::Graph(ga), Features::Graph(gb)) = (&a.features, &b.features) else { panic!() };
    assert_eq!(ga.node_features(), gb.node_features());
    assert_eq!(ga.edges(), gb.edges());
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.label_mask, b.label_mask);
    assert_eq!(a.splits, b.splits);
    assert_eq!(a.class_count, b.class_count);
}

#[test]
fn two_community_roundtrip() {
    let d = synth_generate(SynthKind::TwoCommunity, &SynthParams::for_kind(SynthKind::TwoCommunity), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_nodegraph(&d, dir.path()).unwrap();
    let back = load_nodegraph(&NodegraphPaths::in_dir(dir.path())).unwrap();
    same_nodegraph(&d, &back);
    let again = load_nodegraph(&NodegraphPaths::in_dir(dir.path())).unwrap();
    assert_eq!(again.provenance.digest, back.provenance.digest);
}

#[test]
fn nodegraph_mask_semantics_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("features.txt"), "1 0\n0 1\n1 1\n").unwrap();
    fs::write(p.join("edges.txt"), "0 1\n1 2\n").unwrap();
    fs::write(p.join("labels.txt"), "0\n1\n1\n").unwrap();
    fs::write(p.join("mask.txt"), "1\n1\n1\n").unwrap();
    let d = load_nodegraph(&NodegraphPaths::in_dir(p)).unwrap();
    assert_eq!(d.labeled(d.split("train").unwrap()), vec![0, 1, 2]);
    assert!(d.split("test").unwrap().is_empty());
    fs::write(p.join("labels.txt"), "0\n1\n").unwrap();
    let err = load_nodegraph(&NodegraphPaths::in_dir(p)).unwrap_err();
    assert!(err.to_string().contains("row mismatch"), "{err}");
    fs::write(p.join("labels.txt"), "0\n1\n1\n").unwrap();
    fs::write(p.join("edges.txt"), "0 1\n1 7\n").unwrap();
    let err = load_nodegraph(&NodegraphPaths::in_dir(p)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: Some(2), .. }), "{err}");
}

/// Newman modularity of a partition, computed from the edge list.
fn modularity(n: usize, edges: &[(usize, usize)], community: &[usize]) -> f64 {
    let m = edges.len() as f64;
    let mut deg = vec![0.0; n];
    let mut inside = 0.0;
    for &(u, v) in edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
        if community[u] == community[v] {
            inside += 1.0;
        }
    }
    let k = community.iter().max().unwrap() + 1;
    let mut tot = vec![0.0; k];
    for i in 0..n {
        tot[community[i]] += deg[i];
    }
    inside / m - tot.iter().map(|t| (t / (2.0 * m)).powi(2)).sum::<f64>()
}

#[test]
fn planted_partition_is_modular() {
    let mut p = SynthParams::for_kind(SynthKind::TwoCommunity);
    p.samples = 200;
    let d = synth_generate(SynthKind::TwoCommunity, &p, 5).unwrap();
    let Features::Graph(g) = &d.features else { panic!() };
    let q = modularity(200, g.edges(), &d.labels);
    assert!(q > 0.3, "modularity {q}");
    assert!(d.labeled(&(0..200).collect::<Vec<_>>()).len() == 40);
}

#[test]
fn blobs_are_linearly_separable() {
    let d = synth_generate(SynthKind::GaussianBlobs, &SynthParams::for_kind(SynthKind::GaussianBlobs), 2).unwrap();
    let Features::Dense(x) = &d.features else { panic!() };
    let train = d.split("train").unwrap();
    // nearest class mean: a linear rule fitted on the train split
    let dim = x.row_len();
    let mut means = vec![vec![0.0; dim]; 2];
    let mut counts = [0.0; 2];
    for &i in train {
        counts[d.labels[i]] += 1.0;
        for j in 0..dim {
            means[d.labels[i]][j] += x.row(i)[j];
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|v| *v /= counts[c]);
    }
    let test = d.split("test").unwrap();
    let correct = test
        .iter()
        .filter(|&&i| {
            let dist = |c: usize| -> f64 { (0..dim).map(|j| (x.row(i)[j] - means[c][j]).powi(2)).sum() };
            (dist(1) < dist(0)) as usize == d.labels[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn synth_is_deterministic() {
    for k in SynthKind::ALL {
        let p = SynthParams {
            samples: 60,
            labeled_per_class: 5,
            ..SynthParams::for_kind(k)
        };
        let a = synth_generate(k, &p, 11).unwrap();
        let b = synth_generate(k, &p, 11).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.provenance, b.provenance);
        match (&a.features, &b.features) {
            (Features::Dense(x), Features::Dense(y)) => assert_eq!(x, y),
            (Features::Graph(x), Features::Graph(y)) => assert_eq!(x.node_features(), y.node_features()),
            (Features::Graphs(x), Features::Graphs(y)) => {
                assert!(x.iter().zip(y).all(|(g, h)| g.edges() == h.edges() && g.node_features() == h.node_features()))
            }
            _ => panic!(),
        }
        let c = synth_generate(k, &p, 12).unwrap();
        assert_ne!(a.provenance.digest, c.provenance.digest);
    }
}

#[test]
fn tu_import_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let w = |name: &str, body: &str| fs::write(p.join(format!("M_{name}.txt")), body).unwrap();
    w("A", "1, 2\n2, 1\n2, 3\n3, 2\n4, 5\n5, 4\n");
    w("graph_indicator", "1\n1\n1\n2\n2\n");
    w("graph_labels", "1\n0\n");
    w("node_labels", "0\n1\n2\n6\n6\n");
    let recs = import_tu(p, "M").unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].nodes, vec![0, 1, 2]);
    assert_eq!(recs[0].edges, vec![(0, 1), (1, 2)]);
    assert_eq!((recs[0].label, recs[1].label), (1, 0));
    assert_eq!(recs[1].edges, vec![(0, 1)]);
    let file = p.join("out.jsonl");
    fs::write(&file, write_multigraph(&recs)).unwrap();
    assert!(load_multigraph(&file).is_err_and(|e| matches!(e, Error::Stratification(_))));

    w("node_labels", "0\n1\n2\n6\n");
    let err = import_tu(p, "M").unwrap_err();
    assert!(matches!(err, Error::Parse { line: Some(5), .. }), "{err}");
    w("node_labels", "0\n1\n2\n6\n6\n");
    w("A", "1, 2\n2\n");
    let err = import_tu(p, "M").unwrap_err();
    assert!(matches!(err, Error::Parse { line: Some(2), .. }), "{err}");
}

#[test]
fn planetoid_import_writes_a_nodegraph() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut content = String::new();
    for i in 0..50 {
        content.push_str(&format!("p{i} {} {} {}\n", i % 2, (i + 1) % 2, if i % 2 == 0 { "Theory" } else { "Neural" }));
    }
    fs::write(p.join("x.content"), content).unwrap();
    fs::write(p.join("x.cites"), "p0 p1\np2 p4\np3 missing\n").unwrap();
    let out = p.join("graph");
    assert_eq!(import_planetoid(&p.join("x.content"), &p.join("x.cites"), &out).unwrap(), 50);
    let d = load_nodegraph(&NodegraphPaths::in_dir(&out)).unwrap();
    assert_eq!((d.len(), d.class_count, d.input_width()), (50, 2, 2));
    assert_eq!(d.label_mask.as_ref().unwrap().iter().filter(|&&m| m).count(), 40);
    assert_eq!(d.split("test").unwrap().len(), 10);
    let Features::Graph(g) = &d.features else { panic!() };
    assert_eq!(g.edges().len(), 2);
}

#[test]
fn splitting_a_loaded_dataset_is_seeded() {
    let d = synth_generate(SynthKind::GaussianBlobs, &SynthParams::default(), 0).unwrap();
    let a = split(d.clone(), &[0.5, 0.25, 0.25], 4).unwrap();
    let b = split(d, &[0.5, 0.25, 0.25], 4).unwrap();
    assert_eq!(a.splits, b.splits);
    assert_eq!(a.split("val").unwrap().len(), 250);
}
