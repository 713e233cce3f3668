#include <gtest/gtest.h>

#include <random>

#include "../support/oracles.hpp"
#include "fhirmap/validation.hpp"

using namespace fhirmap;

namespace {

const std::vector<FhirResourceDoc>& corpus() {
    static const auto c = load_fhir_corpus(testenv::fixtures() / "corpus");
    return c;
}

ChatResponse text_reply(std::string s) {
    ChatResponse r;
    r.text = std::move(s);
    return r;
}

MappingDocument one(const std::string& path) { return MappingDocument{{{"a", {{path}}, false}}, {}, {}}; }

}  // namespace

TEST(ParseMapping, PlaceholdersAccepted) {
    auto doc = parse_mapping_response(text_reply(
        R"({"mappings":[{"attribute":"value","candidates":["Observation.valueQuantity.value","N/A","N/A"]}]})"));
    ASSERT_EQ(doc.mappings.size(), 1u);
    const auto& c = doc.mappings[0].candidates;
    ASSERT_EQ(c.size(), 3u);
    EXPECT_FALSE(c[0].placeholder());
    EXPECT_TRUE(c[1].placeholder());
    EXPECT_TRUE(c[2].placeholder());
}

TEST(ParseMapping, EmptyMappingsIsValidButEmpty) {
    auto doc = parse_mapping_response(text_reply(R"({"mappings":[]})"));
    EXPECT_TRUE(doc.empty());
}

TEST(ParseMapping, ProseIsAParseErrorWithOffset) {
    try {
        (void)parse_mapping_response(text_reply("Sure! Here is the mapping you asked for."));
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos) << e.what();
    }
    try {
        (void)parse_mapping_text(R"({"mappings": [ oops ]})");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 15"), std::string::npos) << e.what();
    }
}

TEST(ParseMapping, SchemaViolationsNameTheField) {
    auto expect_field = [](const std::string& text, const std::string& field) {
        try {
            (void)parse_mapping_text(text);
            ADD_FAILURE() << text;
        } catch (const ParseError& e) {
            EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
        }
    };
    expect_field(R"([])", "top level");
    expect_field(R"({"maps":[]})", "mappings");
    expect_field(R"({"mappings":{}})", "mappings");
    expect_field(R"({"mappings":[{"candidates":[]}]})", "mappings[0].attribute");
    expect_field(R"({"mappings":[{"attribute":"a"}]})", "mappings[0].candidates");
    expect_field(R"({"mappings":[{"attribute":"a","candidates":[1]}]})", "mappings[0].candidates[0]");
    expect_field(R"({"mappings":[{"attribute":"a","candidates":["A.b","A.c","A.d","A.e"]}]})", "mappings[0].candidates");
    expect_field(R"({"mappings":[{"attribute":"a","candidates":["A.b","A.b"]}]})", "repeats");
    expect_field(R"({"mappings":[{"attribute":"a","candidates":[]},{"attribute":"a","candidates":[]}]})", "mappings[1].attribute");
}

TEST(ParseMapping, CodeFenceAndToolCall) {
    auto doc = parse_mapping_text("```json\n{\"mappings\":[{\"attribute\":\"a\",\"candidates\":[\"Patient.gender\"]}]}\n```");
    EXPECT_EQ(doc.mappings[0].candidates[0].text, "Patient.gender");
    ChatResponse r;
    r.tool_call = ToolCall{"Patient", R"({"mappings":[{"attribute":"g","candidates":["Patient.gender"]}]})"};
    EXPECT_EQ(parse_mapping_response(r).mappings[0].attribute, "g");
    EXPECT_THROW((void)parse_mapping_response(ChatResponse{}), ParseError);
}

TEST(ParseMapping, AbsentAttributesRecordedAsUnmapped) {
    auto doc = parse_mapping_response(text_reply(R"({"mappings":[{"attribute":"a","candidates":["Patient.gender"]}]})"),
                                      {"a", "b"});
    ASSERT_EQ(doc.mappings.size(), 2u);
    ASSERT_NE(doc.find("b"), nullptr);
    EXPECT_TRUE(doc.find("b")->candidates.empty());
}

TEST(ParseMapping, MalformedPathsSurviveForValidation) {
    auto doc = parse_mapping_text(R"({"mappings":[{"attribute":"a","candidates":["Observation..code","observation code"]}]})");
    EXPECT_EQ(doc.mappings[0].candidates[1].text, "observation code");
}

TEST(ParseMapping, RoundTripIsIdentity) {
    std::mt19937_64 rng(99);
    const std::vector<std::string> pool{"Observation.code", "Observation.valueQuantity.unit", "Patient.gender", "N/A",
                                        "Encounter.period.start", "Banana.split"};
    for (int t = 0; t < 200; ++t) {
        MappingDocument d;
        std::size_t n = rng() % 5;
        for (std::size_t i = 0; i < n; ++i) {
            AttributeMapping m{"attr" + std::to_string(i), {}, rng() % 2 == 0};
            std::vector<std::string> p = pool;
            std::shuffle(p.begin(), p.end(), rng);
            std::size_t k = rng() % 4;
            for (std::size_t j = 0; j < k; ++j) m.candidates.push_back({p[j]});
            d.mappings.push_back(m);
        }
        auto text = mapping_to_json(d).dump();
        auto back = parse_mapping_text(text);
        EXPECT_EQ(back.mappings, d.mappings);
        EXPECT_EQ(mapping_to_json(back).dump(), text);
    }
}

TEST(ElementPathSyntax, Cases) {
    EXPECT_TRUE(parse_element_path("Observation.code"));
    EXPECT_TRUE(parse_element_path("Observation.valueQuantity.unit"));
    EXPECT_FALSE(parse_element_path("Observation"));
    EXPECT_FALSE(parse_element_path("Observation..code"));
    EXPECT_FALSE(parse_element_path("Observation.value[x]"));
    EXPECT_FALSE(parse_element_path("Observation.code."));
    EXPECT_FALSE(parse_element_path("1Observation.code"));
    EXPECT_FALSE(parse_element_path(""));
    EXPECT_EQ(parse_element_path("A.b.c")->str(), "A.b.c");
}

TEST(Validate, Examples) {
    EXPECT_TRUE(validate_mapping(one("Observation.code"), corpus()).empty());
    auto banana = validate_mapping(one("Observation.banana"), corpus());
    ASSERT_EQ(banana.size(), 1u);
    EXPECT_EQ(banana[0].kind, IssueKind::unknown_element);
    auto res = validate_mapping(one("Banana.code"), corpus());
    ASSERT_EQ(res.size(), 1u);
    EXPECT_EQ(res[0].kind, IssueKind::unknown_resource);
    EXPECT_EQ(validate_mapping(one("N/A"), corpus()).at(0).kind, IssueKind::placeholder);
    EXPECT_EQ(validate_mapping(one("Observation..code"), corpus()).at(0).kind, IssueKind::malformed);
}

TEST(Validate, CaseSensitive) {
    EXPECT_EQ(validate_mapping(one("observation.code"), corpus()).at(0).kind, IssueKind::unknown_resource);
    EXPECT_EQ(validate_mapping(one("Observation.Code"), corpus()).at(0).kind, IssueKind::unknown_element);
}

TEST(Validate, CompleteAndOnlyIndexedPathsPass) {
    std::mt19937_64 rng(5);
    std::vector<std::string> indexed;
    for (const auto& r : corpus()) indexed.insert(indexed.end(), r.element_index.begin(), r.element_index.end());
    std::vector<std::string> junk{"N/A", "Observation.banana", "Banana.code", "Observation..x", "Patient",
                                  "observation.status", "Patient.name.given.extra"};
    for (int t = 0; t < 200; ++t) {
        MappingDocument d;
        std::size_t total = 0, grounded = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            AttributeMapping m{"a" + std::to_string(i), {}, false};
            std::size_t k = rng() % 4;
            for (std::size_t j = 0; j < k; ++j) {
                bool good = rng() % 2 == 0;
                m.candidates.push_back({good ? indexed[rng() % indexed.size()] : junk[rng() % junk.size()]});
                ++total;
            }
            d.mappings.push_back(m);
        }
        auto issues = validate_mapping(d, corpus());
        for (const auto& m : d.mappings)
            for (const auto& c : m.candidates) {
                bool in_index = false;
                for (const auto& r : corpus()) in_index = in_index || r.has_element(c.text);
                grounded += in_index;
            }
        EXPECT_EQ(issues.size() + grounded, total);
    }
}

TEST(Validate, IssueJson) {
    auto issues = validate_mapping(one("Banana.code"), corpus());
    auto j = to_json(issues.at(0));
    EXPECT_EQ(j["kind"], "unknown_resource");
    EXPECT_EQ(j["path"], "Banana.code");
    EXPECT_EQ(j["attribute"], "a");
}
