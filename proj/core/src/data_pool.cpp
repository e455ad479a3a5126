#include "nullbus/data_pool.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "nullbus/rng.hpp"

namespace nullbus {

ClassLabel class_label_from_string(const std::string& s) {
  if (s == "benign") return ClassLabel::benign;
  if (s == "malignant") return ClassLabel::malignant;
  throw std::invalid_argument("unknown class label: \"" + s + "\"");
}

std::string to_string(ClassLabel c) {
  return c == ClassLabel::benign ? "benign" : "malignant";
}

DatasetPool DatasetPool::from_records(std::vector<SampleRecord> records) {
  DatasetPool pool;
  std::set<std::string> seen;
  for (auto& r : records) {
    if (!seen.insert(r.id).second)
      throw std::invalid_argument("duplicate sample id: " + r.id);
    pool.class_counts[r.label]++;
  }
  pool.records = std::move(records);
  return pool;
}

int FoldAssignment::fold_of(const std::string& id) const {
  const auto it = assignment.find(id);
  if (it == assignment.end())
    throw std::invalid_argument("no fold assignment for sample id: " + id);
  return it->second;
}

// ------------------------------------------------------------- manifest csv

namespace {

// Minimal RFC-4180-style cells: quoted when they contain comma, quote or
// newline; doubled quotes inside quoted cells.
std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += "\"";
  return out;
}

std::vector<std::string> csv_split(const std::string& line, int64_t lineno) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
    } else if (c == '"' && cell.empty()) {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  if (quoted)
    throw std::invalid_argument("row " + std::to_string(lineno) + ": unterminated quote");
  cells.push_back(std::move(cell));
  return cells;
}

const char* kManifestHeader = "id,image_path,mask_path,class_label,global_prompt,local_prompt,source";

std::optional<std::string> cell_to_prompt(const std::string& cell) {
  return normalize_prompt(cell.empty() ? std::nullopt : std::optional<std::string>(cell));
}

}  // namespace

DatasetPool load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("manifest is empty: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw std::invalid_argument("manifest " + path.string() + ": bad header, expected \"" +
                                kManifestHeader + "\"");
  std::vector<SampleRecord> records;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = csv_split(line, lineno);
    if (cells.size() != 7)
      throw std::invalid_argument("manifest row " + std::to_string(lineno) + ": expected 7 cells, got " +
                                  std::to_string(cells.size()));
    SampleRecord r;
    r.id = cells[0];
    r.image_path = cells[1];
    r.mask_path = cells[2];
    try {
      r.label = class_label_from_string(cells[3]);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("manifest row " + std::to_string(lineno) + ": " + e.what());
    }
    r.global_prompt = cell_to_prompt(cells[4]);
    r.local_prompt = cell_to_prompt(cells[5]);
    r.source = cells[6];
    if (r.id.empty())
      throw std::invalid_argument("manifest row " + std::to_string(lineno) + ": empty id");
    records.push_back(std::move(r));
  }
  return DatasetPool::from_records(std::move(records));
}

void save_manifest(const std::filesystem::path& path, const DatasetPool& pool) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  out << kManifestHeader << "\n";
  for (const auto& r : pool.records) {
    out << csv_escape(r.id) << "," << csv_escape(r.image_path) << "," << csv_escape(r.mask_path)
        << "," << to_string(r.label) << "," << csv_escape(r.global_prompt.value_or("")) << ","
        << csv_escape(r.local_prompt.value_or("")) << "," << csv_escape(r.source) << "\n";
  }
}

// ------------------------------------------------------------------- folds

FoldAssignment stratified_folds(const DatasetPool& pool, int k, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_folds: k must be >= 2");
  std::map<ClassLabel, std::vector<std::string>> by_class;
  for (const auto& r : pool.records) by_class[r.label].push_back(r.id);
  for (const auto& [label, ids] : by_class) {
    if (static_cast<int>(ids.size()) < k)
      throw std::invalid_argument("stratified_folds: class " + to_string(label) + " has " +
                                  std::to_string(ids.size()) + " members, fewer than k=" +
                                  std::to_string(k));
  }
  FoldAssignment out;
  out.k = k;
  out.seed = seed;
  uint64_t class_index = 0;
  for (auto& [label, ids] : by_class) {
    Rng rng = derive_rng(seed, {0xF01Du, class_index++});
    rng.shuffle(ids);
    for (size_t i = 0; i < ids.size(); ++i)
      out.assignment[ids[i]] = static_cast<int>(i % static_cast<size_t>(k));
  }
  return out;
}

void save_folds(const std::filesystem::path& path, const FoldAssignment& folds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write folds: " + path.string());
  out << "id,fold\n";
  std::vector<std::pair<std::string, int>> rows(folds.assignment.begin(), folds.assignment.end());
  std::sort(rows.begin(), rows.end());
  for (const auto& [id, fold] : rows) out << csv_escape(id) << "," << fold << "\n";
}

FoldAssignment load_folds(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open folds file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || (line != "id,fold" && line != "id,fold\r"))
    throw std::invalid_argument("folds file " + path.string() + ": expected header id,fold");
  FoldAssignment out;
  int max_fold = 0;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = csv_split(line, lineno);
    if (cells.size() != 2)
      throw std::invalid_argument("folds row " + std::to_string(lineno) + ": expected id,fold");
    const int fold = std::stoi(cells[1]);
    if (fold < 0) throw std::invalid_argument("folds row " + std::to_string(lineno) + ": negative fold");
    out.assignment[cells[0]] = fold;
    max_fold = std::max(max_fold, fold);
  }
  out.k = max_fold + 1;
  return out;
}

// -------------------------------------------------------------- preprocess

PreprocessedSample preprocess(const Raster& image, const Raster& mask, int64_t size) {
  if (size <= 0) throw std::invalid_argument("preprocess: size must be positive");
  if (image.h != mask.h || image.w != mask.w)
    throw std::invalid_argument("preprocess: image " + std::to_string(image.h) + "x" +
                                std::to_string(image.w) + " and mask " + std::to_string(mask.h) +
                                "x" + std::to_string(mask.w) + " dimensions differ");
  PreprocessedSample out;
  Tensor img = resize_bilinear_hw(raster_to_tensor(image), size, size);
  double mn = img[0], mx = img[0];
  for (int64_t i = 1; i < img.numel(); ++i) {
    mn = std::min(mn, img[i]);
    mx = std::max(mx, img[i]);
  }
  if (mx > mn) {
    const double inv = 1.0 / (mx - mn);
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = (img[i] - mn) * inv;
  } else {
    // Zero dynamic range maps to all-zeros.
    fill(img, 0.0);
  }
  Tensor msk({mask.h, mask.w});
  for (int64_t i = 0; i < msk.numel(); ++i)
    msk[i] = mask.px[static_cast<size_t>(i)] > 0 ? 1.0 : 0.0;
  out.image = std::move(img);
  out.mask = resize_nearest_hw(msk, size, size);
  return out;
}

PreprocessedSample load_and_preprocess(const SampleRecord& record, int64_t size) {
  PreprocessedSample s = preprocess(read_pgm(record.image_path), read_pgm(record.mask_path), size);
  s.id = record.id;
  s.prompts = record.prompts();
  s.label = record.label;
  return s;
}

// ------------------------------------------------------------ synth pool

namespace {

struct LesionParams {
  double cx, cy;       // center, pixels
  double a, b;         // semi-axes, pixels
  double theta;        // rotation
  double irregularity; // margin perturbation amplitude (0 = smooth)
  int lobes;
  double phase;
  ClassLabel label;
};

bool inside_lesion(const LesionParams& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double u = (dx * std::cos(p.theta) + dy * std::sin(p.theta)) / p.a;
  const double v = (-dx * std::sin(p.theta) + dy * std::cos(p.theta)) / p.b;
  const double rho = std::sqrt(u * u + v * v);
  const double phi = std::atan2(v, u);
  return rho <= 1.0 + p.irregularity * std::sin(p.lobes * phi + p.phase);
}

std::string size_bucket(double area_fraction) {
  if (area_fraction < 0.055) return "small";
  if (area_fraction < 0.10) return "medium";
  return "large";
}

std::string location_bucket(double cx, double cy, double size) {
  const auto third = [size](double v) {
    if (v < 0.40 * size) return 0;
    if (v < 0.60 * size) return 1;
    return 2;
  };
  static const char* rows[] = {"upper", "middle", "lower"};
  static const char* cols[] = {"left", "center", "right"};
  return std::string(rows[third(cy)]) + " " + cols[third(cx)];
}

// Two 3x3 box-blur passes over per-pixel uniform noise give the
// correlated speckle field.
Tensor speckle_field(Rng& rng, int64_t size) {
  Tensor noise({size, size});
  for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = rng.uniform();
  for (int pass = 0; pass < 2; ++pass) {
    Tensor blurred({size, size});
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int64_t dy = -1; dy <= 1; ++dy) {
          for (int64_t dx = -1; dx <= 1; ++dx) {
            const int64_t yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
            acc += noise.at(yy, xx);
            ++cnt;
          }
        }
        blurred.at(y, x) = acc / cnt;
      }
    }
    noise = std::move(blurred);
  }
  return noise;
}

}  // namespace

DatasetPool synth_pool(int64_t n, uint64_t seed, double prompt_fraction,
                       const std::filesystem::path& out_dir, int64_t image_size) {
  if (n < 1) throw std::invalid_argument("synth_pool: n must be >= 1");
  if (prompt_fraction < 0.0 || prompt_fraction > 1.0)
    throw std::invalid_argument("synth_pool: prompt_fraction must lie in [0,1]");

  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "masks");

  // Which records carry prompts: seeded shuffle, first round(f*n) win.
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng pick = derive_rng(seed, {0xFACu});
  pick.shuffle(order);
  const int64_t n_prompted = std::llround(prompt_fraction * static_cast<double>(n));
  std::set<int64_t> prompted(order.begin(), order.begin() + n_prompted);

  std::vector<SampleRecord> records;
  const double s = static_cast<double>(image_size);
  for (int64_t i = 0; i < n; ++i) {
    Rng rng = derive_rng(seed, {0x5EEDu, static_cast<uint64_t>(i)});

    LesionParams p;
    // Alternating labels keep small pools class-balanced (and thus
    // stratifiable); shape parameters still come from the per-sample rng.
    p.label = (i % 2 == 0) ? ClassLabel::benign : ClassLabel::malignant;
    p.cx = rng.uniform(0.22, 0.78) * s;
    p.cy = rng.uniform(0.22, 0.78) * s;
    const double r = rng.uniform(0.09, 0.16) * s;
    // Benign lesions are near-round with smooth margins; malignant ones
    // are elongated with irregular margins. The implied classification
    // rule: malignant iff axis ratio > 1.65 or irregularity > 0.05.
    double ratio;
    if (p.label == ClassLabel::benign) {
      ratio = rng.uniform(1.0, 1.4);
      p.irregularity = 0.0;
      p.lobes = 0;
      p.phase = 0.0;
    } else {
      ratio = rng.uniform(1.8, 2.2);
      p.irregularity = rng.uniform(0.10, 0.20);
      p.lobes = 5 + static_cast<int>(rng.uniform_int(5));
      p.phase = rng.uniform(0.0, 6.283185307179586);
    }
    p.a = r * std::sqrt(ratio);
    p.b = r / std::sqrt(ratio);
    p.theta = rng.uniform(0.0, 3.141592653589793);

    Tensor field = speckle_field(rng, image_size);
    Raster img, msk;
    img.h = img.w = msk.h = msk.w = image_size;
    img.px.resize(static_cast<size_t>(image_size * image_size));
    msk.px.resize(img.px.size());
    int64_t lesion_px = 0;
    for (int64_t y = 0; y < image_size; ++y) {
      for (int64_t x = 0; x < image_size; ++x) {
        const bool in = inside_lesion(p, static_cast<double>(x), static_cast<double>(y));
        double v = 0.45 + 0.7 * (field.at(y, x) - 0.5);
        v *= 0.85 + 0.3 * rng.uniform();  // fine multiplicative speckle
        if (in) {
          v *= 0.30;
          ++lesion_px;
        }
        v = std::clamp(v, 0.0, 1.0);
        img.at(y, x) = static_cast<uint8_t>(std::lround(v * 255.0));
        msk.at(y, x) = in ? 255 : 0;
      }
    }

    SampleRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "synth_%04lld", static_cast<long long>(i));
    rec.id = idbuf;
    rec.image_path = (out_dir / "images" / (rec.id + ".pgm")).string();
    rec.mask_path = (out_dir / "masks" / (rec.id + ".pgm")).string();
    rec.label = p.label;
    rec.source = "synthetic";
    if (prompted.count(i)) {
      const double area_fraction = static_cast<double>(lesion_px) / (s * s);
      const std::string margin = p.irregularity > 0.05 ? "irregular" : "smooth";
      rec.global_prompt = size_bucket(area_fraction) + " " + to_string(p.label) +
                          " lesion with " + margin + " margin";
      rec.local_prompt = "hypoechoic mass in the " + location_bucket(p.cx, p.cy, s) + " region";
    }
    write_pgm(rec.image_path, img);
    write_pgm(rec.mask_path, msk);
    records.push_back(std::move(rec));
  }
  return DatasetPool::from_records(std::move(records));
}

}  // namespace nullbus
