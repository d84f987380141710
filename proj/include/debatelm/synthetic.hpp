#pragma once

// Deterministic synthetic text: an 8-source debate corpus whose sources fall into four
// groups with distinct topical vocabularies, a general-domain corpus that never uses the
// political key terms, and small downstream task files in CoNLL / JSONL form.

#include <array>
#include <cstdio>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/corpus.hpp"
#include "debatelm/rng.hpp"

namespace debatelm::synthetic {

using Pool = std::vector<std::string_view>;

namespace detail {

/// Zipf-weighted draw (weight 1 / (rank + 1)), so pools have a head and a tail.
inline std::string_view zipf(const Pool& pool, Rng& rng) {
    double total = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i) total += 1.0 / static_cast<double>(i + 1);
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        u -= 1.0 / static_cast<double>(i + 1);
        if (u < 0.0) return pool[i];
    }
    return pool.back();
}

inline std::string_view uniform(const Pool& pool, Rng& rng) { return pool[rng.below(pool.size())]; }

inline std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

/// Pronounceable pseudo-word from a syllable inventory.
inline std::string pseudo_word(Rng& rng, const Pool& onsets, const Pool& nuclei, const Pool& codas,
                               std::size_t min_syl, std::size_t max_syl) {
    const std::size_t n = min_syl + rng.below(max_syl - min_syl + 1);
    std::string w;
    for (std::size_t i = 0; i < n; ++i) {
        w += uniform(onsets, rng);
        w += uniform(nuclei, rng);
        if (rng.uniform() < 0.4) w += uniform(codas, rng);
    }
    return w;
}

inline const Pool kOnsets = {"b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v",
                             "w", "br", "dr", "gr", "st", "tr", "sh", "ch", "cl", "fl"};
inline const Pool kNuclei = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "ie"};
inline const Pool kCodas = {"n", "r", "l", "s", "t", "m", "ck", "nd", "rt", "ll"};

/// Fill `{X}` slots of a template from the slot table.
template <class Fill>
std::string expand(std::string_view tmpl, Fill&& fill) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i);
            out += fill(tmpl.substr(i + 1, close - i - 1));
            i = close;
        } else {
            out += tmpl[i];
        }
    }
    return out;
}

}  // namespace detail

/// Terms that the debate corpus uses heavily and the general corpus never uses.
inline const std::vector<std::string> kKeyTerms = {"deterrent", "endorse", "bureaucrat"};

struct Group {
    std::string_view name;
    Pool nouns, adjectives, verbs;
    std::vector<std::string_view> templates;
};

/// Political vocabulary shared by every source.
inline const Pool kSharedNouns = {"policy",   "reform",   "budget",    "vote",       "law",    "government",
                                  "majority", "deterrent", "minority", "bureaucrat", "mandate", "debate"};
inline const Pool kSharedVerbs = {"support", "reject", "defend", "oppose", "endorse", "fund", "review", "protect"};

inline const std::array<Group, 4>& groups() {
    static const std::array<Group, 4> g = {{
        {"campaign",
         {"jobs", "taxes", "healthcare", "border", "wages", "factories", "families", "veterans", "farmers",
          "paychecks", "pipelines", "small businesses", "insurance", "tariffs", "deficit", "manufacturing", "future", "garage", "income", "justice", "knowledge", "life",
          "medicare", "nominee", "people", "police", "price", "promise", "pride", "profile", "rate", "revenue", "rule",
          "science", "software", "trade", "vaccine", "value", "violence", "voice", "wage", "welfare", "fee", "gate", "home", "hope", "mile",
          "pipe", "rice", "sale", "tide", "vote share", "wire"},
         {"american", "hardworking", "middle-class", "failed", "great", "broken", "rigged", "beautiful"},
         {"cut", "create", "build", "bring back", "fix", "repeal"},
         {"Thank you, {P}. My opponent wants to {V} {N}, and I will {E} the {A} {S} for {N}.",
          "Let me be clear: we will {V} {A} {N} and {E} the {S} on day one.",
          "Look, folks, {A} {N} and {N} matter more than any {S} in {L}.",
          "{P} said we cannot {V} {N}. That is wrong, and every {A} voter in {L} knows it.",
          "When I am president we will {E} the {S}, {V} {N}, and protect {A} {N}."}},
        {"assembly",
         {"sovereignty", "multilateralism", "peacekeeping", "sanctions", "ceasefire", "delegation",
          "humanitarian access", "development goals", "refugees", "disarmament", "mandate renewal", "resolution",
          "charter", "climate finance", "member states", "civilians", "famine", "fragile", "genocide", "hostage",
          "landmine", "league", "peace", "pledge", "purpose", "resilience", "sacrifice", "scale", "structure", "tolerance",
          "truce", "tyranny", "upheaval", "venture", "war crime", "zone", "fire", "lane", "line", "role", "rule", "site",
          "time", "tone", "type", "vine"},
         {"international", "sustainable", "collective", "territorial", "multilateral", "regional", "urgent",
          "humanitarian"},
         {"uphold", "strengthen", "condemn", "implement", "reaffirm", "call upon"},
         {"Mr. President, my delegation from {L} wishes to {V} the {A} {N} and to {E} the {S}.",
          "We {V} all parties to respect {A} {N} and {N} in {L}.",
          "The Council must {E} a {S} that protects {A} {N}, as {P} rightly noted.",
          "{L} stands ready to {V} {N} under the charter and the {A} {S}.",
          "We reaffirm that {A} {N} cannot be achieved without {N} and {S}."}},
        {"commons",
         {"constituency", "amendment", "the honourable gentleman", "the opposition benches", "the chancellor",
          "council tax", "the treasury", "the select committee", "backbenchers", "the whip", "second reading",
          "the despatch box", "my constituents", "the national health service", "the white paper", "hansard",
          "grievance", "guidance", "issue", "lodge", "marriage", "mortgage", "note", "pensioners' revenue", "privilege",
          "procedure", "recourse", "referee", "response", "sentence", "statute", "tribute", "update", "wife", "wardrobe", "fine", "lodge", "mace", "pile", "rose", "seat free",
          "side", "tune", "vice", "wine"},
         {"honourable", "right honourable", "learned", "shadow", "parliamentary", "noble", "gracious", "urgent"},
         {"give way", "table", "commend", "withdraw", "press", "scrutinise"},
         {"I am grateful to {P}, but will the minister {V} the {A} {N} before {N}?",
          "Mr Speaker, the {A} member for {L} will {E} the {S} when {N} returns.",
          "Does the secretary of state agree that {N} must {V} the {S} in {L}?",
          "Order. The {A} {N} will {V} {N} and the house will {E} the {S}.",
          "Will {P} {V} this {S}, or will {N} once again ignore {A} {N}?"}},
        {"parliament",
         {"regulation", "directive", "the commission", "presiding officer", "committee stage", "cohesion funds",
          "the chamber", "rural communities", "the single market", "subsidiarity", "the council", "stakeholders",
          "the rapporteur", "fisheries", "framework programme", "transport links", "fibre", "heritage",
          "infrastructure", "language", "literature", "measure", "nature", "objective", "outcome", "package", "regime",
          "resource", "route", "scheme", "source", "timeframe", "tonne", "usage", "venue", "wildlife", "fibre", "grape", "lake", "plate", "size", "tree",
          "tube", "vale", "wave", "yoke"},
         {"european", "cross-party", "devolved", "national", "regional", "sustainable", "structural",
          "inclusive"},
         {"adopt", "transpose", "consult", "harmonise", "co-finance", "welcome"},
         {"Presiding officer, this chamber should {V} the {A} {N} and {E} the {S}.",
          "On behalf of {P}, I {V} the {A} {N} proposed for {L}.",
          "The committee will {E} the {S} once {N} and {N} are agreed.",
          "Members from {L} {V} {N} because {A} {N} depends on the {S}.",
          "We must {V} {A} {N} so that {N} benefits every region, including {L}."}},
    }};
    return g;
}

struct SourceSpec {
    std::string_view name;
    std::size_t group;
};

/// Eight sources in four planted groups: {us}, {two UN bodies}, {UK commons}, {four parliaments}.
inline const std::array<SourceSpec, 8>& sources() {
    static const std::array<SourceSpec, 8> s = {{{"us_presidential", 0},
                                                 {"un_general_debate", 1},
                                                 {"un_security_council", 1},
                                                 {"uk_commons", 2},
                                                 {"eu_speech", 3},
                                                 {"au_parliament", 3},
                                                 {"parl_scotland", 3},
                                                 {"parlee_ie_uk", 3}}};
    return s;
}

/// Names and places unique to one source.
struct SourceLexicon {
    std::vector<std::string> people;
    std::vector<std::string> places;
};

inline SourceLexicon source_lexicon(std::size_t source_index, std::uint64_t seed, std::size_t n_people = 7,
                                    std::size_t n_places = 3) {
    Rng rng(stream_seed(seed, "synthetic-lexicon", {source_index}));
    SourceLexicon lex;
    for (std::size_t i = 0; i < n_people; ++i)
        lex.people.push_back(detail::capitalize(detail::pseudo_word(rng, detail::kOnsets, detail::kNuclei, detail::kCodas, 2, 3)));
    for (std::size_t i = 0; i < n_places; ++i)
        lex.places.push_back(detail::capitalize(detail::pseudo_word(rng, detail::kOnsets, detail::kNuclei, detail::kCodas, 2, 4)));
    return lex;
}

/// One debate sentence in the style of `source_index`.
inline std::string debate_sentence(std::size_t source_index, const SourceLexicon& lex, Rng& rng) {
    const Group& g = groups()[sources()[source_index].group];
    const auto tmpl = g.templates[rng.below(g.templates.size())];
    std::string s = detail::expand(tmpl, [&](std::string_view slot) -> std::string {
        if (slot == "N") return std::string(detail::zipf(g.nouns, rng));
        if (slot == "A") return std::string(detail::zipf(g.adjectives, rng));
        if (slot == "V") return std::string(detail::zipf(g.verbs, rng));
        if (slot == "S") return std::string(detail::zipf(kSharedNouns, rng));
        if (slot == "E") return std::string(detail::zipf(kSharedVerbs, rng));
        if (slot == "P") return lex.people[rng.below(lex.people.size())];
        if (slot == "L") return lex.places[rng.below(lex.places.size())];
        return std::string(slot);
    });
    return detail::capitalize(std::move(s));
}

struct DebateCorpusConfig {
    std::uint64_t seed = 1;
    std::size_t docs_per_source = 60;
    std::size_t min_sentences = 3;
    std::size_t max_sentences = 8;
    // Small name lexicons keep the whole-word closure of the corpus near 2K tokens, so a
    // 2K vocabulary holds every frequent political term as a single piece.
    std::size_t people_per_source = 7;
    std::size_t places_per_source = 3;
};

/// Raw (uncleaned) documents: some carry markup and links so ingestion has work to do.
inline std::vector<Document> debate_documents(const DebateCorpusConfig& cfg) {
    std::vector<Document> out;
    for (std::size_t s = 0; s < sources().size(); ++s) {
        const auto lex = source_lexicon(s, cfg.seed, cfg.people_per_source, cfg.places_per_source);
        Rng rng(stream_seed(cfg.seed, "synthetic-docs", {s}));
        for (std::size_t d = 0; d < cfg.docs_per_source; ++d) {
            const std::size_t n = cfg.min_sentences + rng.below(cfg.max_sentences - cfg.min_sentences + 1);
            std::string text;
            for (std::size_t i = 0; i < n; ++i) {
                if (i) text += ' ';
                text += debate_sentence(s, lex, rng);
            }
            if (rng.uniform() < 0.1) text = "<p>" + text + "</p>";
            if (rng.uniform() < 0.1) text += " (transcript: https://example.org/" + std::to_string(d) + ")";
            char date[16];
            std::snprintf(date, sizeof date, "20%02zu-%02zu-%02zu", 10 + rng.below(14), 1 + rng.below(12),
                          1 + rng.below(28));
            Document doc;
            doc.id = std::string(sources()[s].name) + "/" + std::to_string(d);
            doc.source = std::string(sources()[s].name);
            doc.date = std::string(date);
            doc.text = std::move(text);
            out.push_back(std::move(doc));
        }
    }
    return out;
}

/// `n` sentences drawn round-robin across sources (used for round-trip and memorization).
inline std::vector<std::string> debate_sentences(std::size_t n, std::uint64_t seed) {
    std::vector<SourceLexicon> lex;
    for (std::size_t s = 0; s < sources().size(); ++s) lex.push_back(source_lexicon(s, seed));
    Rng rng(stream_seed(seed, "synthetic-sentences"));
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = i % sources().size();
        out.push_back(debate_sentence(s, lex[s], rng));
    }
    return out;
}

/// General-domain prose with no political vocabulary.
inline std::vector<std::string> general_sentences(std::size_t n, std::uint64_t seed) {
    static const Pool nouns = {"kitchen", "garden", "river", "mountain", "recipe", "bicycle", "library",
                               "weather", "orchestra", "museum", "harbour", "festival", "village", "forest",
                               "bakery", "telescope", "painting", "stadium", "island", "teacher", "market",
                               "journey", "breakfast", "camera", "theatre", "winter", "summer", "meadow",
                               "lighthouse", "notebook", "sandwich", "puzzle", "ferry", "castle", "desert"};
    static const Pool adjectives = {"quiet", "sunny", "ancient", "bright", "cosy", "windy", "colourful",
                                    "delicious", "busy", "gentle", "famous", "tiny", "enormous", "lively"};
    static const Pool verbs = {"visited", "painted", "cooked", "explored", "photographed", "repaired", "enjoyed",
                               "discovered", "cleaned", "described", "admired", "borrowed"};
    static const std::vector<std::string_view> templates = {
        "Yesterday {P} {V} the {A} {N} near {L}.",
        "The {A} {N} in {L} was full of visitors this {N}.",
        "We {V} a {A} {N} and then walked to the {N}.",
        "{P} says the {N} behind the {N} is {A} in spring.",
        "After the {N}, everyone {V} the {A} {N} together."};
    Rng lex_rng(stream_seed(seed, "general-lexicon"));
    std::vector<std::string> people, places;
    for (int i = 0; i < 300; ++i)
        people.push_back(detail::capitalize(detail::pseudo_word(lex_rng, detail::kOnsets, detail::kNuclei, detail::kCodas, 2, 3)));
    for (int i = 0; i < 150; ++i)
        places.push_back(detail::capitalize(detail::pseudo_word(lex_rng, detail::kOnsets, detail::kNuclei, detail::kCodas, 2, 4)));
    Rng rng(stream_seed(seed, "general-sentences"));
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto tmpl = templates[rng.below(templates.size())];
        out.push_back(detail::capitalize(detail::expand(tmpl, [&](std::string_view slot) -> std::string {
            if (slot == "N") return std::string(detail::zipf(nouns, rng));
            if (slot == "A") return std::string(detail::zipf(adjectives, rng));
            if (slot == "V") return std::string(detail::zipf(verbs, rng));
            if (slot == "P") return people[rng.below(people.size())];
            return places[rng.below(places.size())];
        })));
    }
    return out;
}

/// Wrap sentences as single-sentence documents of one source.
inline Corpus sentences_corpus(const std::vector<std::string>& sentences, std::string_view source) {
    debatelm::CorpusBuilder b;
    for (std::size_t i = 0; i < sentences.size(); ++i)
        b.add(std::string(source) + "/" + std::to_string(i), std::string(source), std::nullopt, sentences[i]);
    return std::move(b).finish();
}

// ---------------------------------------------------------------------------------------
// Downstream toy tasks.

struct SentimentExample {
    std::string text;
    std::string label;
};

/// `n_pos` positive then `n_neg` negative speeches, shuffled; polarity is carried by
/// the stance phrase.
inline std::vector<SentimentExample> sentiment_examples(std::size_t n_pos, std::size_t n_neg, std::uint64_t seed) {
    static const Pool pos = {"I rise in support of", "I warmly welcome", "I commend the minister for",
                             "this house should back", "I am proud to vote for"};
    static const Pool neg = {"I rise to oppose", "I utterly reject", "I condemn the minister for",
                             "this house should throw out", "I will vote against"};
    const auto lex = source_lexicon(3, seed);
    Rng rng(stream_seed(seed, "sentiment"));
    std::vector<SentimentExample> out;
    for (std::size_t i = 0; i < n_pos + n_neg; ++i) {
        const bool positive = i < n_pos;
        std::string text = std::string(detail::uniform(positive ? pos : neg, rng)) + " the " +
                           std::string(detail::zipf(groups()[2].nouns, rng)) + ". " + debate_sentence(3, lex, rng);
        out.push_back({detail::capitalize(std::move(text)), positive ? "positive" : "negative"});
    }
    rng.shuffle(out);
    return out;
}

struct RelationExample {
    std::string text_a, text_b, label;
};

inline std::vector<RelationExample> relation_examples(std::size_t n, std::uint64_t seed) {
    static const Pool support = {"That is exactly why", "This proves that", "Which is why"};
    static const Pool attack = {"But that is false because", "No, the truth is that", "That ignores that"};
    const auto lex = source_lexicon(0, seed);
    Rng rng(stream_seed(seed, "relation"));
    std::vector<RelationExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const bool sup = i % 2 == 0;
        RelationExample e;
        e.text_a = debate_sentence(0, lex, rng);
        e.text_b = std::string(detail::uniform(sup ? support : attack, rng)) + " " +
                   std::string(detail::zipf(groups()[0].nouns, rng)) + " matter.";
        e.label = sup ? "support" : "attack";
        out.push_back(std::move(e));
    }
    rng.shuffle(out);
    return out;
}

struct TaggedSentence {
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
};

/// Named-entity sentences over politician / person / organisation / politicalparty /
/// election / country.
inline std::vector<TaggedSentence> ner_sentences(std::size_t n, std::uint64_t seed) {
    const auto lex = source_lexicon(0, seed, 60, 30);
    static const std::vector<std::vector<std::string_view>> parties = {{"Democratic", "Party"},
                                                                       {"Labour"},
                                                                       {"Green", "Party"},
                                                                       {"Conservative", "Party"}};
    static const std::vector<std::vector<std::string_view>> elections = {{"the", "midterm", "election"},
                                                                         {"the", "general", "election"}};
    static const std::vector<std::vector<std::string_view>> orgs = {{"United", "Nations"}, {"NATO"},
                                                                    {"the", "Treasury"}};
    Rng rng(stream_seed(seed, "ner"));
    std::vector<TaggedSentence> out;
    auto push = [](TaggedSentence& s, const std::vector<std::string_view>& words, std::string_view type) {
        for (std::size_t i = 0; i < words.size(); ++i) {
            s.tokens.emplace_back(words[i]);
            s.tags.push_back(type.empty() ? "O" : std::string(i ? "I-" : "B-") + std::string(type));
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
        TaggedSentence s;
        const std::string senator = lex.people[rng.below(lex.people.size())];
        const std::string person = lex.people[rng.below(lex.people.size())];
        const std::string country = lex.places[rng.below(lex.places.size())];
        switch (rng.below(3)) {
            case 0:
                push(s, {"Senator"}, "");
                push(s, {senator}, "politician");
                push(s, {"of", "the"}, "");
                push(s, parties[rng.below(parties.size())], "politicalparty");
                push(s, {"won"}, "");
                push(s, elections[rng.below(elections.size())], "election");
                push(s, {"."}, "");
                break;
            case 1:
                push(s, {"Minister"}, "");
                push(s, {senator}, "politician");
                push(s, {"met"}, "");
                push(s, {person}, "person");
                push(s, {"in"}, "");
                push(s, {country}, "country");
                push(s, {"."}, "");
                break;
            default:
                push(s, {"The"}, "");
                push(s, orgs[rng.below(orgs.size())], "organisation");
                push(s, {"criticised"}, "");
                push(s, {country}, "country");
                push(s, {"before"}, "");
                push(s, elections[rng.below(elections.size())], "election");
                push(s, {"."}, "");
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Claim/premise spans: "<claim> because <premise> ."
inline std::vector<TaggedSentence> argument_sentences(std::size_t n, std::uint64_t seed) {
    const auto lex = source_lexicon(0, seed);
    Rng rng(stream_seed(seed, "arg-component"));
    std::vector<TaggedSentence> out;
    auto words_of = [](const std::string& text) {
        std::vector<std::string> w;
        std::string cur;
        for (char c : text) {
            if (c == ' ') {
                if (!cur.empty()) w.push_back(cur), cur.clear();
            } else if (c == '.' || c == ',' || c == ':') {
                if (!cur.empty()) w.push_back(cur), cur.clear();
                w.emplace_back(1, c);
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) w.push_back(cur);
        return w;
    };
    for (std::size_t i = 0; i < n; ++i) {
        TaggedSentence s;
        auto tag_span = [&](const std::vector<std::string>& words, std::string_view type) {
            for (std::size_t k = 0; k < words.size(); ++k) {
                s.tokens.push_back(words[k]);
                s.tags.push_back(type.empty() ? "O" : std::string(k ? "I-" : "B-") + std::string(type));
            }
        };
        const auto& g = groups()[0];
        tag_span({"I", "think"}, "");
        tag_span(words_of("we must " + std::string(detail::zipf(g.verbs, rng)) + " " +
                          std::string(detail::zipf(g.nouns, rng))),
                 "claim");
        tag_span({"because"}, "");
        tag_span(words_of(std::string(detail::zipf(g.nouns, rng)) + " in " +
                          lex.places[rng.below(lex.places.size())] + " are " +
                          std::string(detail::zipf(g.adjectives, rng))),
                 "premise");
        tag_span({"."}, "");
        out.push_back(std::move(s));
    }
    return out;
}

inline std::string to_conll(const std::vector<TaggedSentence>& sentences) {
    std::string out;
    for (const auto& s : sentences) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i) out += s.tokens[i] + "\t" + s.tags[i] + "\n";
        out += "\n";
    }
    return out;
}

inline std::string to_jsonl(const std::vector<SentimentExample>& xs) {
    std::string out;
    for (const auto& x : xs) out += nlohmann::json{{"text", x.text}, {"label", x.label}}.dump() + "\n";
    return out;
}

inline std::string to_jsonl(const std::vector<RelationExample>& xs) {
    std::string out;
    for (const auto& x : xs)
        out += nlohmann::json{{"text_a", x.text_a}, {"text_b", x.text_b}, {"label", x.label}}.dump() + "\n";
    return out;
}

}  // namespace debatelm::synthetic
