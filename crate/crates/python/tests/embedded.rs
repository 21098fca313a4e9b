use std::ffi::CString;

use pyo3::prelude::*;

use fever_py::fever_py;

// Everything shares one embedded interpreter, so it lives in a single test.
#[test]
fn module_works_from_python() {
    pyo3::append_to_inittab!(fever_py);
    let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");
    let work = tempfile::tempdir().unwrap();
    let code = format!(
        r#"
import fever_py as fp

assert fp.normalize_title(" Soul Food -LRB-film-RRB- ") == "Soul_Food_(film)"
assert fp.display_title("Soul_Food_-LRB-film-RRB-") == "Soul Food (film)"
assert fp.edit_distance("kitten", "sitting") == 3
assert "Murda Beatz" in fp.extract_query_terms("Murda Beatz's real name is Marshall.")

d = fp.TitleDictionary(["Dresden", "Dresden_Frauenkirche", "Elbe"])
assert d.lookup("Dresdn", 1) == [("Dresden", 1)]
assert len(d) == 3

idx = fp.TfIdfIndex(["a", "b"], ["the river flows", "a town by the sea"], norm="none")
assert [k for k, _ in idx.top_k("river", 5)] == ["a"]
try:
    fp.TfIdfIndex(["a"], ["x"], norm="max")
    raise SystemExit("bad norm accepted")
except ValueError:
    pass

x = [[0.0], [0.1], [1.0], [1.1]]
y = [0, 0, 1, 1]
m = fp.Gbdt.fit(x, y, n_classes=2, n_estimators=10)
assert m.predict([1.05]) == 1 and m.predict([0.05]) == 0
losses = m.staged_log_loss(x, y)
assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
assert fp.Gbdt.from_json(m.to_json()).predict_proba([0.5]) == m.predict_proba([0.5])

assert len(fp.build_features([(0.2, 0.3, 0.5, 1.0)])) == 20
assert len(fp.build_features([], (0.2, 0.3, 0.5))) == 24

merged = fp.apply_reretrieval_scaling([("A", 0, 0.5), ("A", 1, 0.1)], [("B", 0, 0.99, "A", 1)])
assert merged[0] == ("A", 0, 0.5)
assert abs(dict(((p, l), r) for p, l, r in merged)[("B", 0)] - 0.099) < 1e-12

report = fp.evaluate(
    [{{"id": 1, "predicted_label": "SUPPORTS", "predicted_evidence": [["A", 0]]}}],
    [{{"id": 1, "claim": "c", "label": "SUPPORTS", "evidence": [[[0, 0, "A", 0]]]}}],
)
assert report["fever_score"] == 1.0

p = fp.Pipeline("{fixtures}/config.json", work_dir="{work}")
try:
    p.run_stage("select")
    raise SystemExit("missing upstream not reported")
except RuntimeError:
    pass
outcomes = p.run_all()
assert [o["stage"] for o in outcomes] == ["ingest", "index", "retrieve", "select", "aggregate", "evaluate"]
assert all(o["cache_hit"] for o in p.run_all())
c = fp.Corpus.ingest("{fixtures}/wiki.jsonl")
assert len(c) == 20 and "Dresden" in c
"#,
        work = work.path().display()
    );
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        py.run(&code, None, None).map_err(|e| e.display(py)).unwrap();
    });
}
