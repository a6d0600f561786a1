from conftest import running_tree, tree_of
from qlogprov.analysis import ColumnRef, RelationRef
from qlogprov.catalog import CatalogState
from qlogprov.generator import sales_catalog
from qlogprov.provenance import (
    extract_provenance,
    extract_tree_provenance,
    generate_script,
    split_batch,
)


def test_script_is_preorder_and_spans_locate_nodes():
    tree = running_tree(2)
    script = generate_script(tree)
    assert script.node_ids == ["0", "0.0", "0.1", "0.2", "0.2.0"]
    # Containers are kept for replay but not analyzed.
    assert [s.analyze for s in script] == [False, True, True, False, True]
    for st in script:
        a, b = st.span
        assert script.text[a:b] == st.query_text
        assert script.locate(a) == st.node_id and script.locate(b - 1) == st.node_id
    assert script.locate(len(script.text) + 5) is None


def test_running_example_node_provenance():
    prov, _ = extract_tree_provenance(running_tree(1), sales_catalog())
    assert set(prov) == {"0.0", "0.1", "0.2.0"}
    assert {r.name for r in prov["0.1"].inputs} == {"newSales.csv"}
    assert {r.name for r in prov["0.2.0"].inputs} == {"StagedSales", "ConversionRate"}


def test_split_batch_respects_literals():
    assert split_batch("SELECT 'a;b' FROM t; UPDATE t SET a=1\nGO\nSELECT 2") == [
        "SELECT 'a;b' FROM t",
        "UPDATE t SET a=1",
        "SELECT 2",
    ]


def test_drop_and_recreate_yields_new_generation():
    tree = tree_of(
        "a",
        (
            "EXECUTE p",
            [
                ("INSERT INTO T (a) SELECT x FROM S", []),
                ("DROP TABLE T", []),
                ("CREATE TABLE T (a int)", []),
                ("INSERT INTO T (a) SELECT x FROM S", []),
            ],
        ),
    )
    cat = CatalogState.from_tables({"T": ["a"], "S": ["x"]})
    prov, after = extract_tree_provenance(tree, cat)
    first, second = prov["0.0"], prov["0.3"]
    [t1], [t2] = first.outputs, second.outputs
    assert (t1.name, t2.name) == ("T", "T") and t2.generation == t1.generation + 1
    assert after.lookup("dbo", "T").generation == t2.generation
    # The input catalog is untouched.
    assert cat.lookup("dbo", "T").generation == t1.generation


def test_select_into_sees_its_own_table():
    tree = tree_of("a", ("EXECUTE p", [("SELECT x INTO #w FROM S", []), ("INSERT INTO T (a) SELECT x FROM #w", [])]))
    prov, _ = extract_tree_provenance(tree, CatalogState.from_tables({"T": ["a"], "S": ["x"]}))
    w = RelationRef("dbo", "#w", "table")
    assert {r.name for r in prov["0.0"].outputs} == {"#w"}
    t = next(iter(prov["0.1"].outputs))
    [src] = prov["0.1"].column_map[ColumnRef(t, "a")]
    assert src.relation.name == w.name and src.column == "x"


def test_multi_statement_node_is_unioned():
    tree = tree_of("a", ("EXECUTE p", [("INSERT INTO T (a) SELECT x FROM S; DELETE FROM U", [])]))
    cat = CatalogState.from_tables({"T": ["a"], "S": ["x"], "U": ["u"]})
    prov, _ = extract_tree_provenance(tree, cat)
    assert {r.name for r in prov["0.0"].outputs} == {"T", "U"}


def test_runtime_only_nodes_get_no_provenance():
    tree = tree_of("a", ("EXECUTE p", [("UPDATE T SET a = 1", [])]))
    tree.find("0.0").annotations["route"] = "runtime_only"
    prov, _ = extract_provenance(generate_script(tree), CatalogState.from_tables({"T": ["a"]}))
    assert prov == {}


def test_cache_gives_identical_results():
    tree = running_tree(2)
    cache = {}
    plain, _ = extract_tree_provenance(tree, sales_catalog())
    cat = sales_catalog()
    once, _ = extract_tree_provenance(tree, cat, cache=cache)
    twice, _ = extract_tree_provenance(tree, cat, cache=cache)
    assert plain == once == twice and cache
