// Success paths only: building a JsError needs a JavaScript host.

use serde_json::Value;

#[test]
fn presets_and_columns_fill_the_canvas() {
    let n = dlsp_wasm::side();
    for name in ["bilayer", "columns_w4", "columns_w10", "blocking_layer", "blob_field"] {
        let g = dlsp_wasm::preset(name).unwrap();
        assert_eq!(g.len(), n * n, "{name}");
        assert!(g.iter().all(|&b| b == 0 || b == 255));
    }
    let open = dlsp_wasm::columnar(10, 0).unwrap();
    let blocked = dlsp_wasm::columnar(10, 6).unwrap();
    assert!(open[(n - 1) * n..].contains(&255));
    assert!(blocked[(n - 6) * n..].iter().all(|&b| b == 0));
}

#[test]
fn oracle_json_and_density() {
    let g = dlsp_wasm::columnar(6, 0).unwrap();
    let v: Value = serde_json::from_str(&dlsp_wasm::oracle(&g).unwrap()).unwrap();
    let jsc = v["jsc"].as_f64().unwrap();
    assert!(jsc > 0.0);
    let blocked: Value = serde_json::from_str(&dlsp_wasm::oracle(&dlsp_wasm::columnar(6, 6).unwrap()).unwrap()).unwrap();
    assert!(blocked["jsc"].as_f64().unwrap() < jsc);
    let d = dlsp_wasm::exciton_density(&g).unwrap();
    assert_eq!(d.len(), g.len());
    assert_eq!(d.iter().max(), Some(&255));
}

#[test]
fn short_simulation_is_seeded() {
    let a = dlsp_wasm::simulate(3, 50, 0.0).unwrap();
    assert_eq!(a, dlsp_wasm::simulate(3, 50, 0.0).unwrap());
    assert_ne!(a, dlsp_wasm::simulate(4, 50, 0.0).unwrap());
}
