#include "speechsql/schema_encoder.hpp"
#include "speechsql/train.hpp"
#include "support.hpp"

#include <algorithm>
#include <numeric>

using namespace speechsql;

namespace {

Schema school(bool with_fk) {
  Schema s;
  s.db_id = "school";
  s.tables = {{"student", {{"sid"}, {"sname"}, {"age"}}}, {"pet", {{"pid"}, {"sid"}, {"pname"}}}};
  if (with_fk) s.foreign_keys = {{"pet", "sid", "student", "sid"}};
  return s;
}

int count_edges(const SchemaGraph& g, EdgeType type) {
  return static_cast<int>(std::count_if(g.edges.begin(), g.edges.end(), [&](const GraphEdge& e) { return e.type == type; }));
}

bool has_edge(const SchemaGraph& g, int a, int b, EdgeType type) {
  return std::any_of(g.edges.begin(), g.edges.end(), [&](const GraphEdge& e) {
    return e.type == type && ((e.a == a && e.b == b) || (e.a == b && e.b == a));
  });
}

ag::Matrix dense_gcn(const ag::Matrix& a, const ag::Matrix& h, const ag::Matrix& t1, const ag::Matrix& t2) {
  ag::Matrix hidden = a * h * t1;
  hidden = hidden.cwiseMax(0.0);
  return a * hidden * t2;
}

}  // namespace

TEST_SUITE("schema_encoder") {
  TEST_CASE("student/pet graph merges the shared column") {
    auto g = build_schema_graph(school(false));
    CHECK(g.n_tables == 2);
    CHECK(g.n_nodes() == 7);
    CHECK(count_edges(g, EdgeType::kTableColumn) == 6);
    CHECK(count_edges(g, EdgeType::kForeignKey) == 0);
    REQUIRE(g.merged_map.count("sid") == 1);
    CHECK(g.merged_map.at("sid").size() == 2);
    CHECK(g.nodes[0].kind == NodeKind::kTable);
    CHECK(g.nodes[2].kind == NodeKind::kColumn);
  }

  TEST_CASE("single table graph") {
    Schema s;
    s.db_id = "t";
    s.tables = {{"t", {{"a"}, {"b"}}}};
    auto g = build_schema_graph(s);
    CHECK(g.n_nodes() == 3);
    CHECK(g.edges.size() == 2);
  }

  TEST_CASE("a foreign key links the two table nodes") {
    const auto& s = testing::shipped_schemas().at("products_colors");
    auto g = build_schema_graph(s);
    int products = s.table_index("Products"), colors = s.table_index("Ref_Colors");
    CHECK(has_edge(g, products, colors, EdgeType::kForeignKey));
    CHECK(count_edges(g, EdgeType::kForeignKey) == 1);
    CHECK(g.n_nodes() == 2 + 6);
  }

  TEST_CASE("normalized adjacency is symmetric with the expected diagonal") {
    auto g = build_schema_graph(school(true));
    auto a = g.normalized_adjacency();
    CHECK((a - a.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    // student: itself, 3 columns, pet through the foreign key.
    CHECK(a(0, 0) == doctest::Approx(1.0 / 5.0));
  }

  TEST_CASE("two-node GCN equals the dense computation") {
    ag::Matrix a(2, 2);
    a << 0.5, 0.5, 0.5, 0.5;  // D^-1/2 (A+I) D^-1/2 for one edge
    SchemaGraph g;
    g.nodes = {{NodeKind::kTable, "t", {"t"}}, {NodeKind::kColumn, "c", {"c"}}};
    g.edges = {{0, 1, EdgeType::kTableColumn}};
    g.n_tables = 1;
    CHECK((g.normalized_adjacency() - a).cwiseAbs().maxCoeff() < 1e-15);

    ag::Matrix h(2, 2), t1(2, 2), t2(2, 2);
    h << 1.0, -2.0, 0.5, 3.0;
    t1 << 1.0, -1.0, 2.0, 0.5;
    t2 << 0.3, 0.7, -1.2, 2.0;
    auto z = gcn(ag::constant(h), a, ag::constant(t1), ag::constant(t2));
    // by hand: A H = [[0.75, 0.5]] twice; times t1 = [1.75, -0.5]; relu -> [1.75, 0]; A keeps it; times t2.
    ag::Matrix expected(2, 2);
    expected << 1.75 * 0.3, 1.75 * 0.7, 1.75 * 0.3, 1.75 * 0.7;
    CHECK((z.value() - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((z.value() - dense_gcn(a, h, t1, t2)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("GCN is permutation equivariant") {
    std::mt19937_64 rng(11);
    auto g = build_schema_graph(testing::shipped_schemas().at("museum_visit"));
    const int n = g.n_nodes();
    auto a = g.normalized_adjacency();
    auto h = testing::random_matrix(n, 6, rng);
    auto t1 = testing::random_matrix(6, 6, rng), t2 = testing::random_matrix(6, 6, rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ag::Matrix p = ag::Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) p(i, perm[i]) = 1.0;
    auto z = gcn(ag::constant(h), a, ag::constant(t1), ag::constant(t2)).value();
    auto zp = gcn(ag::constant(p * h), p * a * p.transpose(), ag::constant(t1), ag::constant(t2)).value();
    CHECK((zp - p * z).cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("disconnected components do not interact") {
    Schema s;
    s.db_id = "two";
    s.tables = {{"left", {{"a"}, {"b"}}}, {"right", {{"c"}, {"d"}}}};
    auto g = build_schema_graph(s);
    auto a = g.normalized_adjacency();
    std::mt19937_64 rng(12);
    auto h = testing::random_matrix(g.n_nodes(), 4, rng);
    auto t1 = testing::random_matrix(4, 4, rng), t2 = testing::random_matrix(4, 4, rng);
    auto z = gcn(ag::constant(h), a, ag::constant(t1), ag::constant(t2)).value();
    // Nodes: left, right, a, b, c, d; perturb the right component.
    ag::Matrix h2 = h;
    for (int r : {1, 4, 5}) h2.row(r) = testing::random_matrix(1, 4, rng);
    auto z2 = gcn(ag::constant(h2), a, ag::constant(t1), ag::constant(t2)).value();
    for (int r : {0, 2, 3}) CHECK(z2.row(r) == z.row(r));
    CHECK(z2.row(1) != z.row(1));
  }

  TEST_CASE("node embedding width and determinism") {
    Vocabulary vocab;
    for (const char* w : {"color", "code", "products", "ref", "colors"}) vocab.add(w);
    SchemaEncoderConfig cfg;
    std::mt19937_64 rng(13);
    ParamStore store;
    init_schema_encoder(store, cfg, vocab.size(), rng);
    SchemaGraph g;
    g.nodes = {{NodeKind::kColumn, "color_code", {"color", "code"}},
               {NodeKind::kColumn, "colorCode", {"color", "code"}},
               {NodeKind::kTable, "products", {"products"}}};
    ag::Context ctx;
    auto h = embed_nodes(ctx, store, cfg, vocab, g);
    CHECK(h.rows() == 3);
    CHECK(h.cols() == 512);
    CHECK(h.value().row(0) == h.value().row(1));
    CHECK(h.value().row(0) != h.value().row(2));

    g.nodes.push_back({NodeKind::kColumn, "", {}});
    CHECK_CODE(embed_nodes(ctx, store, cfg, vocab, g), ErrorCode::kEmptyNodeName);
  }

  TEST_CASE("graph ablations keep the output shape") {
    Vocabulary vocab;
    const auto& s = testing::shipped_schemas().at("employee_hire");
    auto g = build_schema_graph(s);
    for (const auto& n : g.nodes)
      for (const auto& t : n.tokens) vocab.add(t);
    for (auto ablation : {GraphAblation::kIdentity, GraphAblation::kRnn}) {
      SchemaEncoderConfig cfg{16, 8, 12, false, ablation};
      std::mt19937_64 rng(14);
      ParamStore store;
      init_schema_encoder(store, cfg, vocab.size(), rng);
      ag::Context ctx;
      auto h = embed_nodes(ctx, store, cfg, vocab, g);
      auto z = encode_graph(ctx, store, cfg, h, g);
      CHECK(z.rows() == g.n_nodes());
      CHECK(z.cols() == 12);
      if (ablation == GraphAblation::kIdentity) CHECK(z.value() == h.value());
    }
  }

  TEST_CASE("vocabulary reserves special ids") {
    Vocabulary v;
    CHECK(v.size() == 4);
    int id = v.add("draws");
    CHECK(v.add("draws") == id);
    CHECK(v.id("missing") == Vocabulary::kUnk);
    CHECK(v.encode({"draws", "x"}) == std::vector<int>{id, Vocabulary::kUnk});
  }

  TEST_CASE("gradient check on the toy schema encoder") {
    auto r = grad_check("schema_encoder");
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_parameter);
  }
}
