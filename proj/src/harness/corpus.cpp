// Copyright 2026 The quantlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include "quantlab/harness/corpus.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace quantlab {

std::vector<std::int64_t> tokenize_bytes(const std::string& text)
{
    std::vector<std::int64_t> out;
    out.reserve(text.size());
    for (unsigned char c : text)
        out.push_back(c);
    return out;
}

std::vector<std::int64_t> ingest_corpus(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw InputError("cannot open corpus '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty())
        throw InputError("corpus '" + path.string() + "' is empty");
    return tokenize_bytes(bytes);
}

CorpusSplit split_corpus(const std::vector<std::int64_t>& tokens, std::uint64_t seed, std::int64_t block)
{
    if (tokens.empty())
        throw InputError("cannot split an empty corpus");
    const auto n = static_cast<std::int64_t>(tokens.size());
    const std::int64_t blocks = (n + block - 1) / block;
    std::vector<std::int64_t> order(static_cast<std::size_t>(blocks));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::int64_t i = blocks - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)], order[rng() % static_cast<std::uint64_t>(i + 1)]);
    const std::int64_t held = blocks >= 2 ? std::max<std::int64_t>(1, blocks / 10) : 0;
    CorpusSplit split;
    for (std::int64_t i = 0; i < blocks; ++i) {
        const std::int64_t b = order[static_cast<std::size_t>(i)];
        auto first = tokens.begin() + b * block;
        auto last = tokens.begin() + std::min(n, (b + 1) * block);
        auto& dst = i < held ? split.heldout : split.train;
        dst.insert(dst.end(), first, last);
    }
    return split;
}

namespace {

class Lexicon {
public:
    Lexicon(std::mt19937_64& rng, int count, int min_syl, int max_syl)
    {
        static const std::array<const char*, 18> onsets{"b", "c", "d", "f", "g", "h", "l", "m", "n",
                                                        "p", "r", "s", "t", "v", "w", "st", "tr", "pl"};
        static const std::array<const char*, 8> nuclei{"a", "e", "i", "o", "u", "ea", "ou", "ai"};
        static const std::array<const char*, 8> codas{"", "", "n", "r", "s", "t", "l", "nd"};
        while (static_cast<int>(words_.size()) < count) {
            const int syl = min_syl + static_cast<int>(rng() % static_cast<std::uint64_t>(max_syl - min_syl + 1));
            std::string w;
            for (int s = 0; s < syl; ++s) {
                w += onsets[rng() % onsets.size()];
                w += nuclei[rng() % nuclei.size()];
                w += codas[rng() % codas.size()];
            }
            if (std::find(words_.begin(), words_.end(), w) == words_.end())
                words_.push_back(w);
        }
        // Zipf-like weights
        for (int i = 0; i < count; ++i)
            weights_.push_back(1.0 / (i + 1.0));
    }

    Lexicon(std::vector<std::string> words) : words_(std::move(words))
    {
        for (std::size_t i = 0; i < words_.size(); ++i)
            weights_.push_back(1.0 / (static_cast<double>(i) + 1.0));
    }

    const std::string& draw(std::mt19937_64& rng) const
    {
        std::discrete_distribution<std::size_t> d(weights_.begin(), weights_.end());
        return words_[d(rng)];
    }

    /// Word tied to a context key, making choices predictable from earlier words.
    const std::string& related(std::size_t key, std::mt19937_64& rng) const
    {
        const std::size_t span = std::min<std::size_t>(4, words_.size());
        return words_[(key * 2654435761u + rng() % span) % words_.size()];
    }

private:
    std::vector<std::string> words_;
    std::vector<double> weights_;
};

} // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Lexicon nouns(rng, 120, 1, 3);
    Lexicon verbs(rng, 60, 1, 2);
    Lexicon adjectives(rng, 50, 1, 3);
    Lexicon determiners({"the", "a", "this", "every", "some", "that"});
    Lexicon prepositions({"of", "in", "on", "with", "near", "under", "for"});
    Lexicon conjunctions({"and", "but", "so", "while", "because"});

    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::string out;
    out.reserve(bytes + 256);
    auto noun_phrase = [&](std::string& s) {
        const std::string& det = determiners.draw(rng);
        s += det;
        s += ' ';
        if (u(rng) < 0.4) {
            s += adjectives.draw(rng);
            s += ' ';
        }
        const std::string& n = nouns.draw(rng);
        s += n;
        return std::hash<std::string>{}(n);
    };
    while (out.size() < bytes) {
        std::string sentence;
        const int clauses = u(rng) < 0.3 ? 2 : 1;
        for (int c = 0; c < clauses; ++c) {
            if (c > 0) {
                sentence += ", ";
                sentence += conjunctions.draw(rng);
                sentence += ' ';
            }
            const std::size_t subject = noun_phrase(sentence);
            sentence += ' ';
            sentence += verbs.related(subject, rng);
            sentence += ' ';
            const std::size_t object = noun_phrase(sentence);
            if (u(rng) < 0.35) {
                sentence += ' ';
                sentence += prepositions.draw(rng);
                sentence += ' ';
                sentence += determiners.draw(rng);
                sentence += ' ';
                sentence += nouns.related(object, rng);
            }
        }
        sentence[0] = static_cast<char>(sentence[0] - 'a' + 'A');
        sentence += u(rng) < 0.9 ? ". " : "? ";
        if (u(rng) < 0.08)
            sentence += '\n';
        out += sentence;
    }
    out.resize(bytes);
    return out;
}

} // namespace quantlab
