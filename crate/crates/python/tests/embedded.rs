// SPDX-License-Identifier: MIT OR Apache-2.0

use lookahead_lab::lookahead_lab;
use pyo3::prelude::*;

#[test]
fn module_works_inside_an_embedded_interpreter() {
    pyo3::append_to_inittab!(lookahead_lab);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c"
import lookahead_lab as ll
p = ll.Position()
assert p.perft(2) == 400
assert ll.classify(['e5', 'e5', 'f7']) == '112'
assert ll.pattern_match('11223', '...AAC')
m = ll.Model.planted(7)
assert m.plant() == (1, 2)
start, pv, corrupted, source, target = ll.plant_fixtures(1, 3)[0]
probs, value = m.evaluate(start)
assert abs(sum(probs.values()) - 1.0) < 1e-9
rows = ll.sweep_residual(m, start, pv, corrupted)
best = max(rows, key=lambda r: r[4])
assert best[4] > 2.0
try:
    ll.Position('not a fen')
    raise AssertionError('expected ValueError')
except ValueError:
    pass
",
            None,
            None,
        )
        .unwrap();
    });
}
