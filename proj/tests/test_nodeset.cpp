#include "cadm/nodeset.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

using namespace cadm::nodeset;

// Independent expansion oracle: each segment rendered to its full choice
// list up front, then an iterative cross product. Shares no code with
// expand().
namespace {

std::vector<std::string> cross_product(const std::vector<std::vector<std::string>>& choices) {
    std::vector<std::string> acc{""};
    for (const auto& seg : choices) {
        std::vector<std::string> next;
        next.reserve(acc.size() * seg.size());
        for (const auto& prefix : acc)
            for (const auto& piece : seg) next.push_back(prefix + piece);
        acc = std::move(next);
    }
    return acc;
}

}  // namespace

TEST_CASE("parse: single range after literal") {
    NodePattern p = parse_pattern("wnode2{1-4}");
    REQUIRE(p.segments.size() == 2);
    CHECK(std::get<Literal>(p.segments[0]).text == "wnode2");
    CHECK(std::get<Range>(p.segments[1]) == Range{1, 4, 1});
}

TEST_CASE("parse: plain literal is identity") {
    NodePattern p = parse_pattern("wnode33");
    REQUIRE(p.segments.size() == 1);
    CHECK(std::get<Literal>(p.segments[0]).text == "wnode33");
}

TEST_CASE("parse: mixed groups with zero padding") {
    NodePattern p = parse_pattern("w{01-03}n{a,b}");
    REQUIRE(p.segments.size() == 4);
    CHECK(std::get<Literal>(p.segments[0]).text == "w");
    CHECK(std::get<Range>(p.segments[1]) == Range{1, 3, 2});
    CHECK(std::get<Literal>(p.segments[2]).text == "n");
    CHECK(std::get<List>(p.segments[3]).alternatives == std::vector<std::string>{"a", "b"});
}

TEST_CASE("parse errors carry byte offsets") {
    using Catch::Matchers::ContainsSubstring;
    try {
        parse_pattern("wnode2{1-4");
        FAIL("expected throw");
    } catch (const PatternError& e) {
        CHECK(e.kind == PatternError::Kind::UnbalancedBrace);
        CHECK(e.offset == 6);
    }
    try {
        parse_pattern("a}b");
        FAIL("expected throw");
    } catch (const PatternError& e) {
        CHECK(e.kind == PatternError::Kind::UnbalancedBrace);
        CHECK(e.offset == 1);
    }
    try {
        parse_pattern("x{4-2}");
        FAIL("expected throw");
    } catch (const PatternError& e) {
        CHECK(e.kind == PatternError::Kind::ReversedRange);
        CHECK(e.offset == 1);
    }
    try {
        parse_pattern("x{}");
        FAIL("expected throw");
    } catch (const PatternError& e) {
        CHECK(e.kind == PatternError::Kind::EmptyGroup);
        CHECK(e.offset == 1);
    }
    CHECK_THROWS_AS(parse_pattern("x{a,}"), PatternError);
    CHECK_THROWS_AS(parse_pattern(""), PatternError);
    CHECK_THROWS_AS(parse_pattern("x{1-99999999999999999999}"), PatternError);
}

TEST_CASE("expand: the wnode transcript") {
    CHECK(expand("wnode2{1-4}").nodes ==
          std::vector<std::string>{"wnode21", "wnode22", "wnode23", "wnode24"});
}

TEST_CASE("expand: degenerate literal") {
    CHECK(expand("a").nodes == std::vector<std::string>{"a"});
}

TEST_CASE("expand: cross product vs brute-force oracle") {
    std::vector<std::vector<std::string>> choices = {
        {"w"}, {"01", "02", "03"}, {"n"}, {"a", "b"}};
    auto expected = cross_product(choices);
    REQUIRE(expected == std::vector<std::string>{"w01na", "w01nb", "w02na", "w02nb", "w03na", "w03nb"});
    CHECK(expand("w{01-03}n{a,b}").nodes == expected);
}

TEST_CASE("expand: width rules") {
    CHECK(expand("{8-12}").nodes == std::vector<std::string>{"8", "9", "10", "11", "12"});
    CHECK(expand("{08-12}").nodes == std::vector<std::string>{"08", "09", "10", "11", "12"});
    CHECK(expand("{098-102}").nodes == std::vector<std::string>{"098", "099", "100", "101", "102"});
}

TEST_CASE("expand: cap guards runaway patterns") {
    CHECK_THROWS(expand("n{0-99999}"));
    CHECK_NOTHROW(expand("n{0-99999}", 200000));
    CHECK_THROWS(expand("a{0-9999}{0-9999}{0-9999}"));  // cardinality overflows the cap by far
}

TEST_CASE("read_list: transcript, empty, trim/skip") {
    std::istringstream a("wnode33\nwnode53\nwnode61\nwnode84");
    CHECK(read_list(a).nodes == std::vector<std::string>{"wnode33", "wnode53", "wnode61", "wnode84"});
    std::istringstream b("");
    CHECK(read_list(b).nodes.empty());
    std::istringstream c("  a \n\n b ");
    CHECK(read_list(c).nodes == std::vector<std::string>{"a", "b"});
}

TEST_CASE("validate flags duplicates and empties") {
    NodeList l{{"a", "b", "a", "c", "b", "a"}};
    auto rep = validate(l);
    CHECK(rep.duplicates == std::vector<std::string>{"a", "b"});
    CHECK(rep.ok() == false);
    CHECK(validate(NodeList{{"x", "y"}}).ok());
}

TEST_CASE("nodes_from_arg: dash reads stdin") {
    std::istringstream in("n1\nn2\n");
    CHECK(nodes_from_arg("-", in).nodes == std::vector<std::string>{"n1", "n2"});
    std::istringstream unused("zz\n");
    CHECK(nodes_from_arg("m{1-2}", unused).nodes == std::vector<std::string>{"m1", "m2"});
}

// Property: expansion equals an independently generated cross product, the
// size equals the product of segment cardinalities, repeated expansion is
// identical, and rendering the result as an explicit list round-trips.
TEST_CASE("property: random patterns vs oracle and round trip") {
    std::mt19937 rng(20240811);
    auto rand_int = [&](int lo, int hi) { return int(rng() % unsigned(hi - lo + 1)) + lo; };
    const std::string alpha = "abcdefghijklmnopqrstuvwxyz";

    for (int iter = 0; iter < 300; ++iter) {
        std::string text;
        std::vector<std::vector<std::string>> choices;
        int nseg = rand_int(1, 4);
        bool prev_group = true;  // force a leading literal so adjacent groups stay parseable
        for (int s = 0; s < nseg; ++s) {
            int kind = prev_group ? 0 : rand_int(0, 2);
            if (kind == 0) {
                int len = rand_int(1, 3);
                std::string lit;
                for (int k = 0; k < len; ++k) lit += alpha[size_t(rand_int(0, 25))];
                text += lit;
                choices.push_back({lit});
                prev_group = false;
            } else if (kind == 1) {
                int lo = rand_int(0, 20);
                int hi = lo + rand_int(0, 9);
                text += "{" + std::to_string(lo) + "-" + std::to_string(hi) + "}";
                std::vector<std::string> c;
                for (int v = lo; v <= hi; ++v) c.push_back(std::to_string(v));
                choices.push_back(c);
                prev_group = true;
            } else {
                int n = rand_int(1, 4);
                std::vector<std::string> alts;
                for (int k = 0; k < n; ++k) {
                    std::string a;
                    int len = rand_int(1, 2);
                    for (int j = 0; j < len; ++j) a += alpha[size_t(rand_int(0, 25))];
                    alts.push_back(a);
                }
                text += "{" + cadm::join(alts, ",") + "}";
                choices.push_back(alts);
                prev_group = true;
            }
        }
        INFO("pattern: " << text);
        auto expanded = expand(text);
        auto expected = cross_product(choices);
        REQUIRE(expanded.nodes == expected);

        std::uint64_t prod = 1;
        for (const auto& c : choices) prod *= c.size();
        REQUIRE(expanded.nodes.size() == prod);

        REQUIRE(expand(text).nodes == expanded.nodes);  // purity

        auto rendered = render_list_pattern(expanded);
        REQUIRE(expand(rendered, expanded.nodes.size() + 1).nodes == expanded.nodes);
    }
}
