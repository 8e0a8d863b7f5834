use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(vibefm_py::vibefm_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("v", module).unwrap();
        if let Err(e) = py.run(code, None, Some(&locals)) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn config_round_trip_and_errors() {
    run(c"
c = v.Config(['seed=5', 'name=t'])
assert c.seed == 5 and c.name == 't'
assert v.Config.parse(c.to_toml(), 'toml', []).hash() == c.hash()
assert v.Config.parse(c.to_json(), 'json', []).hash() == c.hash()
try:
    v.Config(['no.such.key=1'])
    raise AssertionError('accepted a bad key')
except v.VibefmError as e:
    assert str(e).startswith('[')
");
}

#[test]
fn augmentations_and_losses() {
    run(c"
import math
x = [[1.0, -2.0, 3.0, 4.0], [0.5, 0.0, -1.0, 2.0]]
assert v.negate(v.negate(x)) == x
assert v.horizontal_flip(v.horizontal_flip(x)) == x
p = v.permutation(x, 2, 3)
assert sorted(p[0]) == sorted(x[0])
assert abs(v.info_nce([[1.0, 0.0]] * 4, [[1.0, 0.0]] * 4, 0.5) - math.log(4)) < 1e-9
m = v.metrics([0, 1, 1, 2], [0, 1, 2, 2], 3)
assert abs(m['accuracy'] - 0.75) < 1e-12
");
}

#[test]
fn generated_segments_split_and_subsample() {
    run(c"
c = v.Config(['data.synth.runs_per_class=3', 'data.synth.duration_s=4.0'])
segs = v.generate(c, 'SYNTH_A')
assert len(segs) == 4 * 3 * 2
assert {s.label for s in segs} == {0, 1, 2, 3}
assert 0.0 <= v.separability_probe(segs, c) <= 1.0
small = v.subsample(segs, 0.25, 1)
large = v.subsample(segs, 0.5, 1)
assert set(small) <= set(large)
");
}
