#pragma once

#include "prefopt/hash.hpp"
#include "prefopt/numeric.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prefopt {

// Bad input or misuse; the CLI maps it to exit code 2.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite or degenerate arithmetic; exit code 3.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Table = std::vector<std::vector<double>>;

class ResponseSpace {
public:
    ResponseSpace() = default;
    explicit ResponseSpace(std::vector<std::size_t> responses_per_prompt)
        : counts_(std::move(responses_per_prompt))
    {
        if (counts_.empty()) throw UsageError("response space: need at least one prompt");
        for (std::size_t p = 0; p < counts_.size(); ++p) {
            if (counts_[p] < 2) {
                throw UsageError("response space: prompt " + std::to_string(p) + " has fewer than 2 responses");
            }
        }
    }

    static ResponseSpace uniform(std::size_t prompts, std::size_t responses)
    {
        return ResponseSpace(std::vector<std::size_t>(prompts, responses));
    }

    std::size_t num_prompts() const noexcept { return counts_.size(); }
    std::size_t responses(std::size_t prompt) const { return counts_.at(prompt); }
    const std::vector<std::size_t>& responses_per_prompt() const noexcept { return counts_; }
    std::size_t total() const noexcept
    {
        std::size_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }

    void check_prompt(std::size_t prompt) const
    {
        if (prompt >= counts_.size()) {
            throw UsageError("prompt index " + std::to_string(prompt) + " out of range");
        }
    }
    void check_response(std::size_t prompt, std::size_t response) const
    {
        check_prompt(prompt);
        if (response >= counts_[prompt]) {
            throw UsageError("response index " + std::to_string(response) + " out of range for prompt " +
                             std::to_string(prompt));
        }
    }

    // Throws unless the table has exactly this shape and finite entries.
    void check_table(const Table& t, const char* what) const
    {
        if (t.size() != counts_.size()) throw UsageError(std::string(what) + ": prompt count mismatch");
        for (std::size_t p = 0; p < t.size(); ++p) {
            if (t[p].size() != counts_[p]) {
                throw UsageError(std::string(what) + ": row " + std::to_string(p) + " has wrong length");
            }
            for (double v : t[p]) {
                if (!std::isfinite(v)) {
                    throw UsageError(std::string(what) + ": non-finite entry in row " + std::to_string(p));
                }
            }
        }
    }

    Table zeros() const
    {
        Table t;
        t.reserve(counts_.size());
        for (auto c : counts_) t.emplace_back(c, 0.0);
        return t;
    }

    friend bool operator==(const ResponseSpace&, const ResponseSpace&) = default;

private:
    std::vector<std::size_t> counts_;
};

struct LogRatio {
    double value = 0.0;

    constexpr LogRatio() = default;
    constexpr explicit LogRatio(double v) : value(v) {}
    friend constexpr bool operator==(LogRatio, LogRatio) = default;
};

// Logit table with per-row softmax; immutable once built.
class TabularPolicy {
public:
    TabularPolicy() = default;
    TabularPolicy(ResponseSpace space, Table logits) : space_(std::move(space)), logits_(std::move(logits))
    {
        space_.check_table(logits_, "policy logits");
    }

    static TabularPolicy uniform(const ResponseSpace& space) { return TabularPolicy(space, space.zeros()); }

    // log-probabilities become logits directly; requires strictly positive rows
    static TabularPolicy from_probabilities(const ResponseSpace& space, const Table& probs)
    {
        Table logits = space.zeros();
        if (probs.size() != space.num_prompts()) throw UsageError("probabilities: prompt count mismatch");
        for (std::size_t p = 0; p < probs.size(); ++p) {
            if (probs[p].size() != space.responses(p)) throw UsageError("probabilities: wrong row length");
            for (std::size_t y = 0; y < probs[p].size(); ++y) {
                if (!(probs[p][y] > 0.0)) throw UsageError("probabilities must be strictly positive");
                logits[p][y] = std::log(probs[p][y]);
            }
        }
        return TabularPolicy(space, std::move(logits));
    }

    const ResponseSpace& space() const noexcept { return space_; }
    const Table& logits() const noexcept { return logits_; }
    std::span<const double> row(std::size_t prompt) const
    {
        space_.check_prompt(prompt);
        return logits_[prompt];
    }
    double logit(std::size_t prompt, std::size_t response) const
    {
        space_.check_response(prompt, response);
        return logits_[prompt][response];
    }

    std::vector<double> probs(std::size_t prompt) const { return softmax(row(prompt)); }
    Table prob_table() const
    {
        Table t;
        t.reserve(logits_.size());
        for (const auto& r : logits_) t.push_back(softmax(r));
        return t;
    }

    // SHA-256 over shape and raw IEEE bits.
    std::string content_hash() const
    {
        Sha256 h;
        h.update("prefopt.policy.v1");
        h.update_u64(space_.num_prompts());
        for (std::size_t p = 0; p < logits_.size(); ++p) {
            h.update_u64(logits_[p].size());
            for (double v : logits_[p]) h.update_f64(v);
        }
        return h.hex();
    }

    friend bool operator==(const TabularPolicy&, const TabularPolicy&) = default;

private:
    ResponseSpace space_;
    Table logits_;
};

inline double policy_prob(const TabularPolicy& policy, std::size_t prompt, std::size_t response)
{
    policy.space().check_response(prompt, response);
    const auto row = policy.row(prompt);
    double m = row[0];
    for (double v : row) m = std::fmax(m, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    return std::exp(row[response] - m) / z;
}

// The normalizer cancels, so delta is a plain logit difference.
inline LogRatio log_prob_ratio(const TabularPolicy& policy, std::size_t prompt, std::size_t yw, std::size_t yl)
{
    policy.space().check_response(prompt, yw);
    policy.space().check_response(prompt, yl);
    if (yw == yl) throw UsageError("log_prob_ratio: yw and yl must differ");
    return LogRatio(policy.logits()[prompt][yw] - policy.logits()[prompt][yl]);
}

} // namespace prefopt
