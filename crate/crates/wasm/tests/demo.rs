use lri_wasm::{concrete_masks_json, gaussian_ellipse_json, helix_event_json};

#[test]
fn helix_event_has_consistent_shapes() {
    let v = helix_event_json("", 7, true, 5).unwrap();
    let n = v["points"].as_array().unwrap().len();
    assert_eq!(v["label"], 1);
    assert_eq!(v["important"].as_array().unwrap().len(), n);
    assert_eq!(v["edges"].as_array().unwrap().len(), 5 * n);
    assert!(v["important"].as_array().unwrap().iter().any(|x| x == 1));

    let neg = helix_event_json(r#"{"b_field": 4.0}"#, 7, false, 3).unwrap();
    assert_eq!(neg["label"], 0);
    assert!(neg["important"].as_array().unwrap().iter().all(|x| x == 0));
    assert_eq!(neg["b_field"], 4.0);
    assert!(helix_event_json("{not json", 0, true, 3).is_err());
}

#[test]
fn masks_exceed_half_with_probability_p() {
    // P(m > 1/2) = p at any temperature
    for tau in [0.3, 1.0, 2.0] {
        let v = concrete_masks_json(&[0.1, 0.5, 0.9], tau, 0.7, 3, 40_000).unwrap();
        for row in v["masks"].as_array().unwrap() {
            let p = row["p"].as_f64().unwrap();
            let hist: Vec<u64> = row["histogram"].as_array().unwrap().iter().map(|h| h.as_u64().unwrap()).collect();
            assert_eq!(hist.iter().sum::<u64>(), 40_000);
            let upper = hist[5..].iter().sum::<u64>() as f64 / 40_000.0;
            assert!((upper - p).abs() < 0.01, "tau {tau} p {p} upper {upper}");
        }
    }
    assert!(concrete_masks_json(&[0.5], 0.0, 0.7, 0, 10).is_err());
    assert!(concrete_masks_json(&[1.0], 1.0, 0.7, 0, 10).is_err());
}

#[test]
fn ellipse_follows_factor() {
    let v = gaussian_ellipse_json(&[1.0, 0.0, 0.0, 0.0], 3.0, 1.0, 1.0, 1, 20_000).unwrap();
    assert!((v["lambda1"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    assert!((v["lambda2"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["eigen_ratio"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((v["score"].as_f64().unwrap() + 4f64.ln()).abs() < 1e-12);
    let e1: Vec<f64> = v["e1"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((e1[0].abs() - 1.0).abs() < 1e-12 && e1[1].abs() < 1e-12);
    let s = v["samples"].as_array().unwrap();
    let var_x = s.iter().map(|p| p[0].as_f64().unwrap().powi(2)).sum::<f64>() / s.len() as f64;
    assert!((var_x - 4.0).abs() < 0.2, "{var_x}");
    assert!(gaussian_ellipse_json(&[1.0, 0.0], 1.0, 1.0, 1.0, 0, 1).is_err());
}
