use std::path::Path;

use super::synth::{self, CHIP_SIZE, METERS_PER_PIXEL};
use super::*;
use crate::error::Error;
use crate::rng;
use crate::tensor::Tensor;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("c{k}")).collect()
}

#[test]
fn mask_matches_sampled_dimensions() {
    for specs in [synth::six_class(), synth::separable_three_class()] {
        for (k, spec) in specs.iter().enumerate() {
            for i in 0..300 {
                let mut r = rng::stream(11, rng::SYNTH, (k * 1000 + i) as u64);
                let geom = ShipGeometry::sample(spec, &mut r);
                let mask = geom.mask();
                let (len, wid) = geom.measured_extent(&mask);
                let want_len = geom.length_m / METERS_PER_PIXEL;
                let want_wid = geom.width_m / METERS_PER_PIXEL;
                assert!((len - want_len).abs() <= 1.0, "{}: length {len} vs {want_len}", spec.name);
                assert!((wid - want_wid).abs() <= 1.0, "{}: width {wid} vs {want_wid}", spec.name);
            }
        }
    }
}

fn length_support(spec: &SyntheticClassSpec, n: usize) -> (f64, f64) {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for i in 0..n {
        let g = ShipGeometry::sample(spec, &mut rng::stream(5, rng::SYNTH, i as u64));
        lo = lo.min(g.length_m);
        hi = hi.max(g.length_m);
    }
    (lo, hi)
}

#[test]
fn length_supports_overlap_exactly_where_ranges_do() {
    for specs in [synth::overlapping_three_class(), synth::separable_three_class(), synth::six_class()] {
        let supports: Vec<_> = specs.iter().map(|s| length_support(s, 2000)).collect();
        for a in 0..specs.len() {
            for b in a + 1..specs.len() {
                let [a0, a1] = specs[a].length_range;
                let [b0, b1] = specs[b].length_range;
                let declared = a0.max(b0) < a1.min(b1);
                let seen = supports[a].0.max(supports[b].0) < supports[a].1.min(supports[b].1);
                assert_eq!(declared, seen, "{} vs {}", specs[a].name, specs[b].name);
            }
        }
    }
    // The published general cargo and bulk carrier ranges overlap.
    let six = synth::six_class();
    let find = |n: &str| six.iter().find(|s| s.name == n).unwrap().clone();
    assert_eq!(find("General Cargo").length_range, [90.0, 200.0]);
    assert_eq!(find("Bulk Carrier").length_range, [150.0, 275.0]);
}

#[test]
fn rendered_chips_stay_in_range_and_hull_is_brighter() {
    let spec = &synth::overlapping_three_class()[0];
    let mut r = rng::stream(3, rng::SYNTH, 0);
    let geom = ShipGeometry::sample(spec, &mut r);
    let px = synth::render(spec, &geom, &mut r);
    assert_eq!(px.len(), CHIP_SIZE * CHIP_SIZE);
    let mask = geom.mask();
    let mean = |on: bool| {
        let v: Vec<f64> = px.iter().zip(&mask).filter(|(_, &m)| m == on).map(|(&p, _)| p as f64).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > 4.0 * mean(false));
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_deterministic_and_counted() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let specs = synth::overlapping_three_class();
    let m = generate_synthetic(&specs, 100, 4, 7, a.path()).unwrap();
    generate_synthetic(&specs, 100, 4, 7, b.path()).unwrap();
    assert_eq!(m.split(Split::Train).len(), 300);
    assert_eq!(m.class_counts(Split::Test), vec![4, 4, 4]);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&specs, 100, 4, 8, c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));

    let loaded = Manifest::load(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded.classes(), m.classes());
    assert_eq!(loaded.entries(), m.entries());
    let echoed = synth::load_specs(&a.path().join("classes.json")).unwrap();
    assert_eq!(echoed, specs);
}

#[test]
fn reload_and_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&synth::separable_three_class(), 2, 1, 1, dir.path()).unwrap();
    for e in m.entries() {
        let path = m.root().join(&e.path);
        let original = std::fs::read(&path).unwrap();
        let (px, w, h) = pgm::read(&path).unwrap();
        assert_eq!(pgm::encode(&px, w, h).unwrap(), original);
        let img: Tensor<f64> = m.load_image(e).unwrap();
        assert_eq!(img.shape(), &[1, 64, 64]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = generate_synthetic(&synth::separable_three_class(), 1, 1, 1, &blocker).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

fn write_manifest(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.csv");
    std::fs::write(&p, body).unwrap();
    p
}

fn touch(dir: &Path, name: &str) {
    pgm::write(&dir.join(name), &[0; 4], 2, 2).unwrap();
}

#[test]
fn manifest_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    touch(dir.path(), "a.pgm");

    let p = write_manifest(dir.path(), "path,label,split\n");
    assert!(Manifest::load(&p).unwrap_err().to_string().contains("no samples"));

    let p = write_manifest(dir.path(), "path,label,split\na.pgm,Tanker,train\na.pgm,Submarine,test\n");
    let declared = vec!["Tanker".to_string()];
    let err = Manifest::load_with_classes(&p, &declared).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    assert!(err.to_string().contains("Submarine"));

    let p = write_manifest(dir.path(), "path,label,split\na.pgm,Tanker,train\na.pgm,Tanker,validation\n");
    let err = Manifest::load(&p).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

    let p = write_manifest(dir.path(), "path,label,split\nmissing.pgm,Tanker,train\n");
    let err = Manifest::load(&p).unwrap_err();
    assert!(err.to_string().contains("missing.pgm"), "{err}");

    let p = write_manifest(dir.path(), "file,class\na.pgm,Tanker\n");
    assert!(matches!(Manifest::load(&p).unwrap_err(), Error::Parse { line: 1, .. }));

    assert!(matches!(Manifest::load(&dir.path().join("nope.csv")).unwrap_err(), Error::Io { .. }));
}

#[test]
fn six_class_manifest_parses() {
    let dir = tempfile::tempdir().unwrap();
    touch(dir.path(), "a.pgm");
    let classes = ["Bulk Carrier", "Container Ship", "Tanker", "Cargo", "Fishing", "General Cargo"];
    let mut body = String::from("path,label,split\n");
    for c in classes {
        body += &format!("a.pgm,{c},train\na.pgm,{c},test\n");
    }
    let m = Manifest::load(&write_manifest(dir.path(), &body)).unwrap();
    assert_eq!(m.num_classes(), 6);
    assert_eq!(m.classes(), classes);
    assert_eq!(m.class_counts(Split::Train), vec![1; 6]);
}

#[test]
fn balance_is_exactly_flat() {
    let labels: Vec<usize> = [vec![0; 20], vec![1; 57], vec![2; 3]].concat();
    let draws = balance_resample(&labels, &names(3), 200, 1, 0, false).unwrap();
    assert_eq!(draws.len(), 600);
    for k in 0..3 {
        assert_eq!(draws.iter().filter(|d| d.label == k).count(), 200);
    }
    assert!(draws.iter().all(|d| labels[d.index] == d.label && !d.flip && d.shift == (0, 0)));
    assert_eq!(draws, balance_resample(&labels, &names(3), 200, 1, 0, false).unwrap());
    assert_ne!(draws, balance_resample(&labels, &names(3), 200, 1, 1, false).unwrap());
}

#[test]
fn balance_names_an_empty_class() {
    let err = balance_resample(&[0, 0, 2], &names(3), 5, 1, 0, false).unwrap_err();
    assert!(err.to_string().contains("c1"), "{err}");
}

#[test]
fn balance_draws_originals_uniformly() {
    // 20 originals to 200 draws: each index is expected 10 times. Pool the
    // chi-square statistic over seeds; 19 dof per seed.
    let labels = vec![0; 20];
    let seeds = 50;
    let mut chi2 = 0.0;
    for seed in 0..seeds {
        let mut counts = [0f64; 20];
        for d in balance_resample(&labels, &names(1), 200, seed, 0, false).unwrap() {
            counts[d.index] += 1.0;
        }
        chi2 += counts.iter().map(|c| (c - 10.0).powi(2) / 10.0).sum::<f64>();
    }
    let dof = 19.0 * seeds as f64;
    let z = (chi2 - dof) / (2.0 * dof).sqrt();
    assert!(z.abs() < 4.0, "chi2 {chi2} over {dof} dof");
}

#[test]
fn augmentation_flips_and_shifts_with_zero_fill() {
    let img = Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 + 1.0);
    let flip = Draw { index: 0, label: 0, flip: true, shift: (0, 0) };
    assert_eq!(balance::augment(&img, &flip).data()[..4], [4.0, 3.0, 2.0, 1.0]);
    let shift = Draw { index: 0, label: 0, flip: false, shift: (1, -1) };
    let out = balance::augment(&img, &shift);
    assert_eq!(out.data(), &[0.0, 5.0, 6.0, 7.0, 0.0, 9.0, 10.0, 11.0, 0.0, 0.0, 0.0, 0.0]);
    let labels = vec![0; 4];
    let draws = balance_resample(&labels, &names(1), 500, 3, 0, true).unwrap();
    assert!(draws.iter().any(|d| d.flip) && draws.iter().any(|d| !d.flip));
    assert!(draws.iter().all(|d| d.shift.0.abs() <= 4 && d.shift.1.abs() <= 4));
    assert!(draws.iter().any(|d| d.shift.0 == 4) && draws.iter().any(|d| d.shift.1 == -4));
}

#[test]
fn spec_json_uses_documented_names() {
    let json = serde_json::to_string(&synth::overlapping_three_class()[2]).unwrap();
    assert!(json.contains("\"brightness_profile\":\"bow-bright\""), "{json}");
    let bad = r#"[{"name":"a","length_range":[10,5],"width_range":[1,2],"brightness_profile":"uniform","texture_scale":0},
                  {"name":"b","length_range":[10,50],"width_range":[1,2],"brightness_profile":"uniform","texture_scale":0}]"#;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    std::fs::write(&p, bad).unwrap();
    assert!(matches!(synth::load_specs(&p).unwrap_err(), Error::Config(_)));
}
