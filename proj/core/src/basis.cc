#include "causalmeta/basis.h"

#include <algorithm>
#include <sstream>

namespace causalmeta {

namespace {

int kind_rank(BasisTerm::Kind k) { return static_cast<int>(k); }

bool term_less(const BasisTerm& x, const BasisTerm& y) {
  if (kind_rank(x.kind) != kind_rank(y.kind)) {
    return kind_rank(x.kind) < kind_rank(y.kind);
  }
  if (x.a != y.a) return x.a < y.a;
  return x.b < y.b;
}

int parse_covariate(std::string_view token, std::string_view whole) {
  if (token.size() < 2 || (token[0] != 'l' && token[0] != 'L')) {
    throw ValidationError("basis term '" + std::string(whole) +
                          "': expected a covariate like l1");
  }
  int idx = 0;
  for (char c : token.substr(1)) {
    if (c < '0' || c > '9') {
      throw ValidationError("basis term '" + std::string(whole) +
                            "': bad covariate index");
    }
    idx = idx * 10 + (c - '0');
  }
  if (idx < 1) {
    throw ValidationError("basis term '" + std::string(whole) +
                          "': covariates are numbered from l1");
  }
  return idx - 1;
}

std::string strip(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c != ' ' && c != '\t') out.push_back(c);
  }
  return out;
}

}  // namespace

BasisSpec::BasisSpec(std::vector<BasisTerm> terms) : terms_(std::move(terms)) {
  for (auto& t : terms_) {
    if (t.kind == BasisTerm::Kind::kInteraction) {
      if (t.a == t.b) {
        t.kind = BasisTerm::Kind::kSquare;
        t.b = -1;
      } else if (t.a > t.b) {
        std::swap(t.a, t.b);
      }
    }
    if (t.kind == BasisTerm::Kind::kConstant) t.a = t.b = -1;
    if (t.kind == BasisTerm::Kind::kLinear || t.kind == BasisTerm::Kind::kSquare) {
      t.b = -1;
    }
    if (t.kind != BasisTerm::Kind::kConstant && t.a < 0) {
      throw ValidationError("basis term with negative covariate index");
    }
  }
  std::sort(terms_.begin(), terms_.end(), term_less);
  if (std::adjacent_find(terms_.begin(), terms_.end()) != terms_.end()) {
    throw ValidationError("basis contains a duplicated term");
  }
  if (terms_.empty()) throw ValidationError("basis must contain at least one term");
}

BasisSpec BasisSpec::main_effects(int num_covariates) {
  std::vector<BasisTerm> terms{{BasisTerm::Kind::kConstant}};
  for (int c = 0; c < num_covariates; ++c) {
    terms.push_back({BasisTerm::Kind::kLinear, c});
  }
  return BasisSpec(std::move(terms));
}

BasisSpec BasisSpec::with_squares(int num_covariates) {
  auto terms = main_effects(num_covariates).terms_;
  for (int c = 0; c < num_covariates; ++c) {
    terms.push_back({BasisTerm::Kind::kSquare, c});
  }
  return BasisSpec(std::move(terms));
}

BasisSpec BasisSpec::parse(std::string_view text, int num_covariates) {
  const std::string cleaned = strip(text);
  if (cleaned == "linear" || cleaned == "main") return main_effects(num_covariates);
  if (cleaned == "quadratic") return with_squares(num_covariates);
  std::vector<BasisTerm> terms;
  std::stringstream ss(cleaned);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    if (tok == "1") {
      terms.push_back({BasisTerm::Kind::kConstant});
    } else if (auto star = tok.find('*'); star != std::string::npos) {
      terms.push_back({BasisTerm::Kind::kInteraction,
                       parse_covariate(std::string_view(tok).substr(0, star), tok),
                       parse_covariate(std::string_view(tok).substr(star + 1), tok)});
    } else if (auto caret = tok.find("^2"); caret != std::string::npos) {
      if (caret + 2 != tok.size()) {
        throw ValidationError("basis term '" + tok + "': only squares are supported");
      }
      terms.push_back({BasisTerm::Kind::kSquare,
                       parse_covariate(std::string_view(tok).substr(0, caret), tok)});
    } else {
      terms.push_back({BasisTerm::Kind::kLinear, parse_covariate(tok, tok)});
    }
  }
  BasisSpec spec(std::move(terms));
  spec.check_covariates(num_covariates);
  return spec;
}

bool BasisSpec::has_constant() const {
  return !terms_.empty() && terms_.front().kind == BasisTerm::Kind::kConstant;
}

bool BasisSpec::has_interactions() const {
  return std::any_of(terms_.begin(), terms_.end(), [](const BasisTerm& t) {
    return t.kind == BasisTerm::Kind::kInteraction;
  });
}

bool BasisSpec::has_squares() const {
  return std::any_of(terms_.begin(), terms_.end(), [](const BasisTerm& t) {
    return t.kind == BasisTerm::Kind::kSquare;
  });
}

int BasisSpec::max_covariate_index() const {
  int m = -1;
  for (const auto& t : terms_) m = std::max({m, t.a, t.b});
  return m;
}

void BasisSpec::check_covariates(Index num_covariates) const {
  for (const auto& t : terms_) {
    if (t.a >= num_covariates || t.b >= num_covariates) {
      throw ValidationError("basis term refers to covariate l" +
                            std::to_string(std::max(t.a, t.b) + 1) + " but only " +
                            std::to_string(num_covariates) + " covariates exist");
    }
  }
}

Vector BasisSpec::evaluate(const Eigen::Ref<const Vector>& l) const {
  Vector out(size());
  for (Index i = 0; i < size(); ++i) {
    const auto& t = terms_[static_cast<std::size_t>(i)];
    switch (t.kind) {
      case BasisTerm::Kind::kConstant:
        out[i] = 1.0;
        break;
      case BasisTerm::Kind::kLinear:
        out[i] = l[t.a];
        break;
      case BasisTerm::Kind::kSquare:
        out[i] = l[t.a] * l[t.a];
        break;
      case BasisTerm::Kind::kInteraction:
        out[i] = l[t.a] * l[t.b];
        break;
    }
  }
  return out;
}

Matrix BasisSpec::design(const Matrix& covariates) const {
  check_covariates(covariates.cols());
  Matrix out(covariates.rows(), size());
  for (Index i = 0; i < size(); ++i) {
    const auto& t = terms_[static_cast<std::size_t>(i)];
    switch (t.kind) {
      case BasisTerm::Kind::kConstant:
        out.col(i).setOnes();
        break;
      case BasisTerm::Kind::kLinear:
        out.col(i) = covariates.col(t.a);
        break;
      case BasisTerm::Kind::kSquare:
        out.col(i) = covariates.col(t.a).cwiseProduct(covariates.col(t.a));
        break;
      case BasisTerm::Kind::kInteraction:
        out.col(i) = covariates.col(t.a).cwiseProduct(covariates.col(t.b));
        break;
    }
  }
  return out;
}

std::string BasisSpec::to_string() const {
  std::string out;
  for (const auto& t : terms_) {
    if (!out.empty()) out += ',';
    switch (t.kind) {
      case BasisTerm::Kind::kConstant:
        out += "1";
        break;
      case BasisTerm::Kind::kLinear:
        out += "l" + std::to_string(t.a + 1);
        break;
      case BasisTerm::Kind::kSquare:
        out += "l" + std::to_string(t.a + 1) + "^2";
        break;
      case BasisTerm::Kind::kInteraction:
        out += "l" + std::to_string(t.a + 1) + "*l" + std::to_string(t.b + 1);
        break;
    }
  }
  return out;
}

}  // namespace causalmeta
