use f2m_web::{
    bound_sweep_json, flatness_profile, flatness_profile_json, session_curves, session_curves_json, DemoOptions,
};
use serde_json::Value;

#[test]
fn empty_options_mean_defaults() {
    assert_eq!(DemoOptions::from_json("").unwrap(), DemoOptions::default());
    assert_eq!(DemoOptions::from_json("{}").unwrap(), DemoOptions::default());
    let o = DemoOptions::from_json(r#"{"seed": 4, "bound": 0.02}"#).unwrap();
    assert_eq!((o.seed, o.bound), (4, 0.02));
}

#[test]
fn unknown_or_invalid_options_are_errors() {
    assert!(DemoOptions::from_json(r#"{"sed": 1}"#).unwrap_err().contains("sed"));
    assert!(session_curves_json(r#"{"bound": -1}"#).is_err());
    assert!(flatness_profile_json("not json").is_err());
}

#[test]
fn session_curves_cover_three_variants() {
    let curves = session_curves(&DemoOptions::default()).unwrap();
    assert_eq!(curves.sessions, [1, 2, 3, 4, 5]);
    let names: Vec<&str> = curves.curves.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["F2M", "naive fine-tune", "baseline"]);
    for c in &curves.curves {
        assert_eq!(c.all.len(), 5);
        assert!(c.new[0].is_none() && c.new[1..].iter().all(Option::is_some));
        assert!(c.all.iter().all(|a| (0.0..=1.0).contains(a)));
    }
    let baseline = &curves.curves[2];
    assert!(baseline.base.iter().all(|&b| b == baseline.base[0]));
    assert_eq!(curves.curves[1].all[0], baseline.all[0]);
}

#[test]
fn json_export_is_deterministic() {
    let options = r#"{"seed": 2, "incremental_epochs": 2}"#;
    let a = session_curves_json(options).unwrap();
    assert_eq!(a, session_curves_json(options).unwrap());
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["curves"].as_array().unwrap().len(), 3);
}

#[test]
fn flatness_grows_with_radius() {
    let options = DemoOptions {
        probe_samples: 100,
        ..DemoOptions::default()
    };
    let p = flatness_profile(&options).unwrap();
    assert_eq!(p.radii.len(), 6);
    for series in [&p.f2m, &p.sgd] {
        assert!(series.iter().all(|&i| i >= 0.0));
        assert!(series.last().unwrap() > series.first().unwrap());
    }
}

#[test]
fn sweep_reports_every_bound() {
    let text = bound_sweep_json(r#"{"incremental_epochs": 1}"#).unwrap();
    let rows: Vec<Value> = serde_json::from_str(&text).unwrap();
    let bounds: Vec<f64> = rows.iter().map(|r| r["bound"].as_f64().unwrap()).collect();
    assert_eq!(bounds, f2m::bench::DEFAULT_BOUND_GRID);
    assert!(rows.iter().all(|r| r["last_new"].as_f64().is_some()));
}
