#include "mecca/session.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "mecca/error.hpp"
#include "mecca/io.hpp"

namespace mecca {

SliceLayer parse_layer(const std::string& s) {
  if (s == "image") return SliceLayer::kImage;
  if (s == "prob") return SliceLayer::kProb;
  if (s == "conf") return SliceLayer::kConf;
  if (s == "hint") return SliceLayer::kHint;
  if (s == "suggestions") return SliceLayer::kSuggestions;
  fail(ErrorKind::kInvalidArgument, "unknown layer '" + s + "'");
}

Plane parse_plane(const std::string& s) {
  if (s == "z") return Plane::kZ;
  if (s == "y") return Plane::kY;
  if (s == "x") return Plane::kX;
  fail(ErrorKind::kInvalidArgument, "plane must be z, y or x");
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

}  // namespace

std::string Slice::encode() const {
  const bool is_label = real.empty() && !labels.empty();
  std::string out;
  out.reserve(12 + 4 * static_cast<std::size_t>(rows) * cols);
  put_u32(out, rows);
  put_u32(out, cols);
  put_u32(out, is_label ? 1u : 0u);
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    if (is_label) {
      bits = static_cast<std::uint32_t>(labels[i]);
    } else {
      std::memcpy(&bits, &real[i], 4);
    }
    put_u32(out, bits);
  }
  return out;
}

Slice Slice::decode(const std::string& bytes) {
  if (bytes.size() < 12) fail(ErrorKind::kMalformedHeader, "slice payload shorter than its header");
  Slice s;
  s.rows = get_u32(bytes, 0);
  s.cols = get_u32(bytes, 4);
  const std::uint32_t dtype = get_u32(bytes, 8);
  if (dtype > 1) fail(ErrorKind::kMalformedHeader, "unknown slice dtype");
  const std::size_t n = static_cast<std::size_t>(s.rows) * s.cols;
  if (bytes.size() != 12 + 4 * n) fail(ErrorKind::kPayloadMismatch, "slice payload size does not match header");
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = get_u32(bytes, 12 + 4 * i);
    if (dtype == 1) {
      s.labels.push_back(static_cast<std::int32_t>(bits));
    } else {
      float f;
      std::memcpy(&f, &bits, 4);
      s.real.push_back(f);
    }
  }
  return s;
}

CreateRequest create_request_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::kValidation, "request body must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "volume" && key != "label" && key != "checkpoint") {
      fail(ErrorKind::kValidation, "unknown field '" + key + "'");
    }
  }
  if (!j.contains("volume") || !j["volume"].is_string()) fail(ErrorKind::kValidation, "'volume' path required");
  if (!j.contains("checkpoint") || !j["checkpoint"].is_string()) {
    fail(ErrorKind::kValidation, "'checkpoint' path required");
  }
  CreateRequest r;
  r.volume = j["volume"].get<std::string>();
  r.checkpoint = j["checkpoint"].get<std::string>();
  if (j.contains("label") && !j["label"].is_null()) {
    if (!j["label"].is_string()) fail(ErrorKind::kValidation, "'label' must be a path");
    r.label = j["label"].get<std::string>();
  }
  return r;
}

struct SessionManager::Session {
  std::string id;
  Sample sample;
  std::shared_ptr<const Models> models;

  mutable std::mutex mu;
  EpisodeState state;
  Volume conf;  // confidence of the last step; 0.5 before the first
  Suggestions suggestions;
  int suggestion_step = 1;
  std::set<HintPoint> hints;
  std::vector<nlohmann::json> history;
  bool busy = false;
};

SessionManager::SessionManager(SessionConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.guide.validate();
  cfg_.episode.validate();
  if (cfg_.max_steps < 1) fail(ErrorKind::kValidation, "max_steps must be at least 1");
  engine_ = std::thread([this] { engine_loop(); });
}

SessionManager::~SessionManager() {
  {
    std::lock_guard lk(queue_mu_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  engine_.join();
}

void SessionManager::engine_loop() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock lk(queue_mu_);
      queue_cv_.wait(lk, [this] { return stopping_ || !queue_.empty(); });
      // Drain pending work before stopping so no future is left hanging.
      if (queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    job();
  }
}

std::shared_ptr<const Models> SessionManager::models_for(const std::filesystem::path& ckpt) {
  const std::string key = std::filesystem::absolute(ckpt).lexically_normal().string();
  {
    std::lock_guard lk(mu_);
    if (auto it = model_cache_.find(key); it != model_cache_.end()) return it->second;
  }
  auto models = std::make_shared<const Models>(load_models(read_checkpoint(ckpt)));
  std::lock_guard lk(mu_);
  return model_cache_.emplace(key, std::move(models)).first->second;
}

std::string SessionManager::create(const CreateRequest& req) {
  Sample s;
  s.image = read_volume(req.volume);
  if (req.label) {
    s.label = read_mask(*req.label);
    require_same_shape(s.image.shape(), s.label->shape(), "session label");
  }
  s.id = req.volume.filename().string();
  return create(std::move(s), models_for(req.checkpoint));
}

std::string SessionManager::create(Sample sample, std::shared_ptr<const Models> models) {
  if (!models) fail(ErrorKind::kInvalidArgument, "session needs models");
  auto s = std::make_shared<Session>();
  s->state = EpisodeState::initial(sample.image);
  s->conf = Volume(sample.image.shape(), 0.5f);
  s->suggestions = suggest(sample.image, s->conf, cfg_.guide, 1);
  s->sample = std::move(sample);
  s->models = std::move(models);
  std::lock_guard lk(mu_);
  s->id = "s" + std::to_string(next_id_++);
  sessions_.emplace(s->id, s);
  return s->id;
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) const {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "no session '" + id + "'");
  return it->second;
}

namespace {

nlohmann::json suggestions_json(int step, const Suggestions& s) {
  return {{"step", step},
          {"supervoxel_count", s.supervoxels.count},
          {"regions", suggestions_to_json(s.regions)}};
}

}  // namespace

nlohmann::json SessionManager::describe(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lk(s->mu);
  const Shape3& sh = s->state.image.shape();
  return {{"id", s->id},
          {"sample", s->sample.id},
          {"shape", {sh.depth, sh.height, sh.width}},
          {"step", s->state.step},
          {"busy", s->busy},
          {"labeled", s->sample.label.has_value()},
          {"hint_count", s->hints.size()},
          {"hints", hints_to_json(std::vector<HintPoint>(s->hints.begin(), s->hints.end()))},
          {"history_length", s->history.size()},
          {"max_steps", cfg_.max_steps}};
}

nlohmann::json SessionManager::submit_hints(const std::string& id, const std::vector<HintPoint>& points) {
  auto s = find(id);
  std::lock_guard lk(s->mu);
  if (s->busy) fail(ErrorKind::kConflict, "session is stepping; resubmit hints afterwards");
  const Shape3& sh = s->state.image.shape();
  for (const auto& p : points) {
    if (!sh.contains(p.z, p.y, p.x)) {
      fail(ErrorKind::kValidation, "hint [" + std::to_string(p.z) + "," + std::to_string(p.y) + "," +
                                       std::to_string(p.x) + "] lies outside " + sh.str());
    }
  }
  std::size_t added = 0;
  for (const auto& p : points) added += s->hints.insert(p).second ? 1 : 0;
  add_hints(s->state, points, cfg_.hint_kernel);
  return {{"hint_count", s->hints.size()}, {"added", added}, {"submitted", points.size()}};
}

std::future<nlohmann::json> SessionManager::step(const std::string& id) {
  auto s = find(id);
  EpisodeState before;
  {
    std::lock_guard lk(s->mu);
    if (s->busy) fail(ErrorKind::kConflict, "a step is already running");
    if (static_cast<int>(s->history.size()) >= cfg_.max_steps) {
      fail(ErrorKind::kConflict, "session reached its step limit");
    }
    s->busy = true;
    before = s->state;
  }
  auto task = std::make_shared<std::packaged_task<nlohmann::json()>>([this, s, before = std::move(before)] {
    try {
      Rng unused(0);  // argmax mode draws nothing
      EngineStep st = engine_step(*s->models, before, SampleMode::kArgmax, unused);
      const int t = before.step + 1;
      nlohmann::json report;
      if (s->sample.label) {
        report = to_json(make_report(t, st, before, *s->sample.label, cfg_.episode));
      } else {
        report = {{"step", t}, {"dice", nullptr}, {"assd", nullptr},
                  {"misunderstanding_rate", nullptr}, {"reward_sum", nullptr}};
      }
      Suggestions sug = suggest(s->sample.image, st.conf.confidence, cfg_.guide, t);
      nlohmann::json out{{"report", report}, {"suggestions", suggestions_json(t, sug)}};

      std::lock_guard lk(s->mu);
      // Hints cannot arrive while busy, so the hint map is still `before`'s.
      s->state = std::move(st.next);
      s->conf = std::move(st.conf.confidence);
      s->suggestions = std::move(sug);
      s->suggestion_step = t;
      s->history.push_back(report);
      s->busy = false;
      return out;
    } catch (...) {
      std::lock_guard lk(s->mu);
      s->busy = false;
      throw;
    }
  });
  std::future<nlohmann::json> fut = task->get_future();
  {
    std::lock_guard lk(queue_mu_);
    queue_.emplace_back([task] { (*task)(); });
  }
  queue_cv_.notify_one();
  return fut;
}

Slice SessionManager::slice(const std::string& id, Plane plane, int index, SliceLayer layer) const {
  auto s = find(id);
  std::lock_guard lk(s->mu);
  const Shape3& sh = s->state.image.shape();
  const int extent = plane == Plane::kZ ? sh.depth : plane == Plane::kY ? sh.height : sh.width;
  if (index < 0 || index >= extent) {
    fail(ErrorKind::kInvalidArgument, "slice index " + std::to_string(index) + " outside [0, " +
                                          std::to_string(extent) + ")");
  }
  Slice out;
  const int rows = plane == Plane::kZ ? sh.height : sh.depth;
  const int cols = plane == Plane::kX ? sh.height : sh.width;
  out.rows = static_cast<std::uint32_t>(rows);
  out.cols = static_cast<std::uint32_t>(cols);
  auto voxel = [&](int r, int c) {
    switch (plane) {
      case Plane::kZ: return sh.index(index, r, c);
      case Plane::kY: return sh.index(r, index, c);
      case Plane::kX: break;
    }
    return sh.index(r, c, index);
  };
  const Volume* src = nullptr;
  switch (layer) {
    case SliceLayer::kImage: src = &s->sample.image; break;
    case SliceLayer::kProb: src = &s->state.prob; break;
    case SliceLayer::kConf: src = &s->conf; break;
    case SliceLayer::kHint: src = &s->state.hint; break;
    case SliceLayer::kSuggestions: break;
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = voxel(r, c);
      if (src) {
        out.real.push_back((*src)[i]);
      } else {
        out.labels.push_back(s->suggestions.supervoxels.labels[i]);
      }
    }
  }
  return out;
}

nlohmann::json SessionManager::suggestions(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lk(s->mu);
  return suggestions_json(s->suggestion_step, s->suggestions);
}

nlohmann::json SessionManager::metrics(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lk(s->mu);
  return {{"id", s->id}, {"steps", s->history}};
}

void SessionManager::remove(const std::string& id) {
  std::lock_guard lk(mu_);
  if (sessions_.erase(id) == 0) fail(ErrorKind::kNotFound, "no session '" + id + "'");
}

std::size_t SessionManager::size() const {
  std::lock_guard lk(mu_);
  return sessions_.size();
}

}  // namespace mecca
