#pragma once

// Tabular ingestion: CSV tables, column schema, standardisation and one-hot
// encoding, deterministic splits, and the synthetic benchmark generator.
//
// Encoded layout: continuous columns first (in column order), then one
// probability-simplex block per categorical column (in column order).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tdce/error.hpp"
#include "tdce/random.hpp"

namespace tdce::data {

// ---------------------------------------------------------------------------
// Number formatting

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw DataError("cannot format number");
    return std::string(buf, ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------------------
// CSV

/// A CSV file as text cells. No quoting support: fields may not contain commas.
struct RawTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column_index(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw DataError("column '" + name + "' not found");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Parses CSV with a header row. Empty cells (missing values) are rejected.
inline RawTable read_csv(std::istream& in) {
    RawTable t;
    std::string line;
    if (!std::getline(in, line)) throw DataError("csv: empty input");
    t.header = split_csv_line(line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        if (cells.size() != t.header.size())
            throw DataError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) +
                            " fields, got " + std::to_string(cells.size()));
        for (std::size_t c = 0; c < cells.size(); ++c)
            if (cells[c].empty())
                throw DataError("csv line " + std::to_string(line_no) + ": missing value in column '" + t.header[c] +
                                "'");
        t.rows.push_back(std::move(cells));
    }
    return t;
}

inline RawTable read_csv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    return read_csv(f);
}

inline void write_csv(std::ostream& out, const RawTable& t) {
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
}

inline void write_csv_file(const std::string& path, const RawTable& t) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path + "'");
    write_csv(f, t);
}

// ---------------------------------------------------------------------------
// Schema

enum class ColumnKind { continuous, categorical };

struct Column {
    std::string name;
    ColumnKind kind = ColumnKind::continuous;
    std::vector<std::string> categories;  // categorical only, sorted
    double mean = 0.0;                    // continuous only
    double stddev = 1.0;                  // continuous only, population std
    bool immutable = false;               // default for the immutable mask
};

/// One categorical column's slice of the encoded vector.
struct Block {
    std::size_t column = 0;  // index into schema columns
    Eigen::Index offset = 0;
    Eigen::Index width = 0;
};

struct Layout {
    Eigen::Index num_dim = 0;
    std::vector<std::size_t> num_columns;  // schema column index per continuous coordinate
    std::vector<Block> blocks;
    Eigen::Index dim = 0;

    Eigen::Index cat_dim() const { return dim - num_dim; }
};

struct TabularSchema {
    std::vector<Column> columns;  // feature columns; the target is not one of them
    std::string target;
    std::array<std::string, 2> target_labels;  // label text for class 0 and class 1

    Layout layout() const {
        Layout l;
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i].kind == ColumnKind::continuous) l.num_columns.push_back(i);
        l.num_dim = static_cast<Eigen::Index>(l.num_columns.size());
        Eigen::Index off = l.num_dim;
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i].kind == ColumnKind::categorical) {
                const auto w = static_cast<Eigen::Index>(columns[i].categories.size());
                l.blocks.push_back({i, off, w});
                off += w;
            }
        l.dim = off;
        return l;
    }

    std::size_t column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i].name == name) return i;
        throw DataError("schema has no column '" + name + "'");
    }

    /// FNV-1a over names, kinds, vocabularies and target; statistics excluded.
    std::string hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&](std::string_view s) {
            for (unsigned char c : s) {
                h ^= c;
                h *= 0x100000001b3ULL;
            }
            h ^= 0x1f;
            h *= 0x100000001b3ULL;
        };
        for (const auto& c : columns) {
            feed(c.name);
            feed(c.kind == ColumnKind::continuous ? "num" : "cat");
            for (const auto& cat : c.categories) feed(cat);
            feed("|");
        }
        feed(target);
        feed(target_labels[0]);
        feed(target_labels[1]);
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }
};

inline nlohmann::json to_json(const TabularSchema& s) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : s.columns) {
        nlohmann::json j{{"name", c.name},
                         {"kind", c.kind == ColumnKind::continuous ? "continuous" : "categorical"},
                         {"immutable", c.immutable}};
        if (c.kind == ColumnKind::continuous) {
            j["mean"] = c.mean;
            j["std"] = c.stddev;
        } else {
            j["categories"] = c.categories;
        }
        cols.push_back(std::move(j));
    }
    return {{"format", "tdce-schema"},
            {"version", 1},
            {"target", s.target},
            {"target_labels", s.target_labels},
            {"columns", cols},
            {"schema_hash", s.hash()}};
}

inline TabularSchema schema_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "tdce-schema") throw DataError("schema json: wrong format tag");
    TabularSchema s;
    s.target = j.at("target").get<std::string>();
    s.target_labels = j.at("target_labels").get<std::array<std::string, 2>>();
    for (const auto& jc : j.at("columns")) {
        Column c;
        c.name = jc.at("name").get<std::string>();
        c.kind = jc.at("kind").get<std::string>() == "continuous" ? ColumnKind::continuous : ColumnKind::categorical;
        c.immutable = jc.value("immutable", false);
        if (c.kind == ColumnKind::continuous) {
            c.mean = jc.at("mean").get<double>();
            c.stddev = jc.at("std").get<double>();
        } else {
            c.categories = jc.at("categories").get<std::vector<std::string>>();
        }
        s.columns.push_back(std::move(c));
    }
    if (j.contains("schema_hash") && j.at("schema_hash").get<std::string>() != s.hash())
        throw DataError("schema json: stored schema_hash does not match contents");
    return s;
}

// ---------------------------------------------------------------------------
// Dataset manifest: which columns are continuous/categorical and immutable.

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::continuous;
    bool immutable = false;
};

struct DatasetManifest {
    std::string target;
    std::vector<ColumnSpec> columns;  // feature columns, in order
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : m.columns)
        cols.push_back({{"name", c.name},
                        {"kind", c.kind == ColumnKind::continuous ? "continuous" : "categorical"},
                        {"immutable", c.immutable}});
    return {{"target", m.target}, {"columns", cols}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.target = j.at("target").get<std::string>();
    for (const auto& jc : j.at("columns")) {
        const auto kind = jc.at("kind").get<std::string>();
        if (kind != "continuous" && kind != "categorical")
            throw DataError("manifest: column kind must be 'continuous' or 'categorical'");
        m.columns.push_back({jc.at("name").get<std::string>(),
                             kind == "continuous" ? ColumnKind::continuous : ColumnKind::categorical,
                             jc.value("immutable", false)});
    }
    return m;
}

/// Numeric columns become continuous, everything else categorical.
inline DatasetManifest infer_manifest(const RawTable& t, const std::string& target) {
    DatasetManifest m;
    m.target = target;
    t.column_index(target);
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        if (t.header[c] == target) continue;
        bool numeric = !t.rows.empty();
        for (const auto& r : t.rows)
            if (!parse_double(r[c])) {
                numeric = false;
                break;
            }
        m.columns.push_back({t.header[c], numeric ? ColumnKind::continuous : ColumnKind::categorical, false});
    }
    return m;
}

/// Fits statistics and vocabularies on `train` (training rows only).
inline TabularSchema fit_schema(const RawTable& train, const DatasetManifest& manifest) {
    if (train.rows.empty()) throw DataError("fit_schema: table has no rows");
    if (manifest.columns.empty()) throw DataError("fit_schema: no feature columns");
    TabularSchema s;
    s.target = manifest.target;
    const auto ti = train.column_index(manifest.target);
    std::set<std::string> labels;
    for (const auto& r : train.rows) labels.insert(r[ti]);
    if (labels.size() != 2)
        throw DataError("fit_schema: target column '" + manifest.target + "' must have exactly two values, found " +
                        std::to_string(labels.size()));
    s.target_labels = {*labels.begin(), *std::next(labels.begin())};
    for (const auto& spec : manifest.columns) {
        const auto ci = train.column_index(spec.name);
        Column c;
        c.name = spec.name;
        c.kind = spec.kind;
        c.immutable = spec.immutable;
        if (spec.kind == ColumnKind::continuous) {
            double sum = 0.0;
            std::vector<double> vals;
            vals.reserve(train.rows.size());
            for (const auto& r : train.rows) {
                auto v = parse_double(r[ci]);
                if (!v) throw DataError("column '" + spec.name + "': non-numeric value '" + r[ci] + "'");
                vals.push_back(*v);
                sum += *v;
            }
            c.mean = sum / static_cast<double>(vals.size());
            double ss = 0.0;
            for (double v : vals) ss += (v - c.mean) * (v - c.mean);
            c.stddev = std::sqrt(ss / static_cast<double>(vals.size()));
            if (!(c.stddev > 0.0)) throw DataError("column '" + spec.name + "' is constant (zero standard deviation)");
        } else {
            std::set<std::string> vocab;
            for (const auto& r : train.rows) vocab.insert(r[ci]);
            if (vocab.size() < 2)
                throw DataError("column '" + spec.name + "': categorical columns need at least two categories");
            c.categories.assign(vocab.begin(), vocab.end());
        }
        s.columns.push_back(std::move(c));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Typed rows

using Cell = std::variant<double, std::string>;
/// Feature values in schema column order (no target).
using FeatureRow = std::vector<Cell>;

inline std::string cell_text(const Cell& c) {
    return std::holds_alternative<double>(c) ? format_double(std::get<double>(c)) : std::get<std::string>(c);
}

struct Dataset {
    std::vector<FeatureRow> rows;
    std::vector<int> labels;
};

/// Parses one feature row from text cells given in schema column order.
inline FeatureRow parse_row(const TabularSchema& s, const std::vector<std::string>& cells) {
    if (cells.size() != s.columns.size())
        throw ShapeError("row has " + std::to_string(cells.size()) + " values, schema has " +
                         std::to_string(s.columns.size()) + " columns");
    FeatureRow row;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& col = s.columns[i];
        if (col.kind == ColumnKind::continuous) {
            auto v = parse_double(cells[i]);
            if (!v) throw DataError("column '" + col.name + "': non-numeric value '" + cells[i] + "'");
            row.emplace_back(*v);
        } else {
            if (!std::binary_search(col.categories.begin(), col.categories.end(), cells[i]))
                throw DataError("column '" + col.name + "': unseen category '" + cells[i] + "'");
            row.emplace_back(cells[i]);
        }
    }
    return row;
}

/// Extracts typed rows (and labels, when the target column is present).
inline Dataset to_dataset(const TabularSchema& s, const RawTable& t) {
    std::vector<std::size_t> idx;
    for (const auto& c : s.columns) idx.push_back(t.column_index(c.name));
    std::optional<std::size_t> ti;
    if (std::find(t.header.begin(), t.header.end(), s.target) != t.header.end()) ti = t.column_index(s.target);
    Dataset d;
    for (const auto& r : t.rows) {
        std::vector<std::string> cells;
        for (auto i : idx) cells.push_back(r[i]);
        d.rows.push_back(parse_row(s, cells));
        if (ti) {
            const auto& lab = r[*ti];
            if (lab == s.target_labels[0]) d.labels.push_back(0);
            else if (lab == s.target_labels[1]) d.labels.push_back(1);
            else throw DataError("target column '" + s.target + "': unseen label '" + lab + "'");
        }
    }
    return d;
}

inline RawTable to_table(const TabularSchema& s, const Dataset& d) {
    RawTable t;
    for (const auto& c : s.columns) t.header.push_back(c.name);
    const bool with_labels = d.labels.size() == d.rows.size() && !d.rows.empty();
    if (with_labels) t.header.push_back(s.target);
    for (std::size_t i = 0; i < d.rows.size(); ++i) {
        std::vector<std::string> cells;
        for (const auto& c : d.rows[i]) cells.push_back(cell_text(c));
        if (with_labels) cells.push_back(s.target_labels[static_cast<std::size_t>(d.labels[i])]);
        t.rows.push_back(std::move(cells));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Encoding

/// Encoded rows, one column per sample, plus labels (may be empty).
struct EncodedBatch {
    Eigen::MatrixXd features;
    std::vector<int> labels;

    Eigen::Index size() const { return features.cols(); }
};

inline Eigen::VectorXd encode_row(const TabularSchema& s, const Layout& l, const FeatureRow& row) {
    if (row.size() != s.columns.size())
        throw ShapeError("encode: row has " + std::to_string(row.size()) + " values, schema has " +
                         std::to_string(s.columns.size()));
    Eigen::VectorXd x = Eigen::VectorXd::Zero(l.dim);
    for (Eigen::Index k = 0; k < l.num_dim; ++k) {
        const auto& col = s.columns[l.num_columns[static_cast<std::size_t>(k)]];
        const auto* v = std::get_if<double>(&row[l.num_columns[static_cast<std::size_t>(k)]]);
        if (!v) throw DataError("encode: column '" + col.name + "' expects a number");
        x(k) = (*v - col.mean) / col.stddev;
    }
    for (const auto& b : l.blocks) {
        const auto& col = s.columns[b.column];
        const auto* v = std::get_if<std::string>(&row[b.column]);
        if (!v) throw DataError("encode: column '" + col.name + "' expects a category");
        auto it = std::lower_bound(col.categories.begin(), col.categories.end(), *v);
        if (it == col.categories.end() || *it != *v)
            throw DataError("column '" + col.name + "': unseen category '" + *v + "'");
        x(b.offset + (it - col.categories.begin())) = 1.0;
    }
    return x;
}

inline EncodedBatch encode(const TabularSchema& s, const std::vector<FeatureRow>& rows,
                           const std::vector<int>& labels = {}) {
    const auto l = s.layout();
    EncodedBatch b;
    b.features.resize(l.dim, static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) b.features.col(static_cast<Eigen::Index>(i)) = encode_row(s, l, rows[i]);
    b.labels = labels;
    return b;
}

inline EncodedBatch encode(const TabularSchema& s, const Dataset& d) { return encode(s, d.rows, d.labels); }

/// Index of the largest entry; ties go to the lowest index.
inline Eigen::Index argmax_lowest(const Eigen::Ref<const Eigen::VectorXd>& v) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = i;
    return best;
}

inline FeatureRow decode_row(const TabularSchema& s, const Layout& l, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != l.dim) throw ShapeError("decode: encoded vector has wrong length");
    FeatureRow row(s.columns.size());
    for (Eigen::Index k = 0; k < l.num_dim; ++k) {
        const auto ci = l.num_columns[static_cast<std::size_t>(k)];
        row[ci] = s.columns[ci].mean + s.columns[ci].stddev * x(k);
    }
    for (const auto& b : l.blocks)
        row[b.column] = s.columns[b.column].categories[static_cast<std::size_t>(
            argmax_lowest(x.segment(b.offset, b.width)))];
    return row;
}

inline std::vector<FeatureRow> decode(const TabularSchema& s, const Eigen::MatrixXd& encoded) {
    const auto l = s.layout();
    std::vector<FeatureRow> rows;
    for (Eigen::Index j = 0; j < encoded.cols(); ++j) rows.push_back(decode_row(s, l, encoded.col(j)));
    return rows;
}

/// Replaces every categorical block with the one-hot vector of its argmax.
inline Eigen::VectorXd harden(const Layout& l, Eigen::VectorXd x) {
    for (const auto& b : l.blocks) {
        const auto k = argmax_lowest(x.segment(b.offset, b.width));
        x.segment(b.offset, b.width).setZero();
        x(b.offset + k) = 1.0;
    }
    return x;
}

// ---------------------------------------------------------------------------
// Immutable mask

/// Per-column mutability: true means the generator may change the column.
struct ImmutableMask {
    std::vector<bool> mutable_columns;

    static ImmutableMask from_defaults(const TabularSchema& s) {
        ImmutableMask m;
        for (const auto& c : s.columns) m.mutable_columns.push_back(!c.immutable);
        return m;
    }
    static ImmutableMask all_mutable(const TabularSchema& s) {
        return {std::vector<bool>(s.columns.size(), true)};
    }
    static ImmutableMask freeze(const TabularSchema& s, const std::vector<std::string>& names) {
        auto m = all_mutable(s);
        for (const auto& n : names) m.mutable_columns[s.column_index(n)] = false;
        return m;
    }

    /// 1 for mutable coordinates, 0 for immutable, in encoded layout.
    Eigen::VectorXd expand(const TabularSchema& s) const {
        if (mutable_columns.size() != s.columns.size())
            throw ShapeError("mask covers " + std::to_string(mutable_columns.size()) + " columns, schema has " +
                             std::to_string(s.columns.size()));
        const auto l = s.layout();
        Eigen::VectorXd m(l.dim);
        for (Eigen::Index k = 0; k < l.num_dim; ++k) m(k) = mutable_columns[l.num_columns[static_cast<std::size_t>(k)]];
        for (const auto& b : l.blocks) m.segment(b.offset, b.width).setConstant(mutable_columns[b.column] ? 1.0 : 0.0);
        return m;
    }
};

// ---------------------------------------------------------------------------
// Synthetic data and splits

/// Two class-separated Gaussian features (means +-1.5, unit variance) and one
/// three-level categorical feature with class-conditional probabilities
/// (0.7, 0.2, 0.1) for class 0 and (0.1, 0.2, 0.7) for class 1.
inline RawTable make_synthetic(std::uint64_t seed, std::size_t n) {
    if (n < 100) throw DataError("make_synthetic: need at least 100 rows");
    Rng rng(seed);
    RawTable t;
    t.header = {"x1", "x2", "c", "y"};
    const std::array<const char*, 3> levels{"a", "b", "c"};
    const std::array<std::array<double, 3>, 2> cond{{{0.7, 0.2, 0.1}, {0.1, 0.2, 0.7}}};
    for (std::size_t i = 0; i < n; ++i) {
        const int y = rng.uniform_open() < 0.5 ? 0 : 1;
        const double mu = y == 1 ? 1.5 : -1.5;
        const double x1 = mu + rng.normal();
        const double x2 = mu + rng.normal();
        const double u = rng.uniform_open();
        const auto& p = cond[static_cast<std::size_t>(y)];
        const std::size_t k = u < p[0] ? 0 : (u < p[0] + p[1] ? 1 : 2);
        t.rows.push_back({format_double(x1), format_double(x2), levels[k], y ? "1" : "0"});
    }
    return t;
}

inline DatasetManifest synthetic_manifest() {
    return {"y", {{"x1", ColumnKind::continuous, false}, {"x2", ColumnKind::continuous, false},
                  {"c", ColumnKind::categorical, false}}};
}

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

/// Shuffles 0..n-1 with `seed`; validation and test take floor(n * f) rows,
/// the remainder goes to training.
inline SplitIndices split(std::size_t n, const std::array<double, 3>& fractions, std::uint64_t seed) {
    const double total = fractions[0] + fractions[1] + fractions[2];
    for (double f : fractions)
        if (f < 0.0) throw DataError("split: fractions must be nonnegative");
    if (std::abs(total - 1.0) > 1e-9) throw DataError("split: fractions must sum to 1");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[1]));
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[2]));
    SplitIndices s;
    s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val),
                  idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), idx.end());
    const std::array<const std::vector<std::size_t>*, 3> parts{&s.train, &s.val, &s.test};
    for (std::size_t i = 0; i < 3; ++i)
        if (fractions[i] > 0.0 && parts[i]->empty())
            throw DataError("split: a split with positive fraction is empty");
    return s;
}

inline RawTable select_rows(const RawTable& t, const std::vector<std::size_t>& idx) {
    RawTable out;
    out.header = t.header;
    for (auto i : idx) out.rows.push_back(t.rows.at(i));
    return out;
}

}  // namespace tdce::data
