use pyo3::prelude::*;
use pyo3::types::PyModule;

#[test]
fn module_exposes_layer_and_model() {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "lkca").unwrap();
        lkca::register(&m).unwrap();
        for name in ["Tensor", "LkcaLayer", "Model", "train", "grad_check"] {
            assert!(m.hasattr(name).unwrap(), "missing {name}");
        }
        let layer = m.getattr("LkcaLayer").unwrap().call1((3, 3, 4)).unwrap();
        let count: u64 = layer.call_method0("count_params").unwrap().extract().unwrap();
        assert_eq!(count, 16 + 4 + 25);
    });
}
