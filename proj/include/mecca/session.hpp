#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mecca/guide.hpp"
#include "mecca/trainer.hpp"

namespace mecca {

struct SessionConfig {
  GuideConfig guide;
  HintKernel hint_kernel;
  EpisodeConfig episode;
  int max_steps = 1000;  // history cap per session
};

enum class SliceLayer { kImage, kProb, kConf, kHint, kSuggestions };
enum class Plane { kZ, kY, kX };

SliceLayer parse_layer(const std::string& s);
Plane parse_plane(const std::string& s);

/// Row-major 2-D cut. Real layers fill `real`; the suggestions layer fills
/// `labels` with region ids.
struct Slice {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> real;
  std::vector<std::int32_t> labels;

  /// Wire format: u32 rows, u32 cols, u32 dtype (0 = f32, 1 = i32), then
  /// rows * cols little-endian values.
  std::string encode() const;
  static Slice decode(const std::string& bytes);
};

struct CreateRequest {
  std::filesystem::path volume;
  std::optional<std::filesystem::path> label;
  std::filesystem::path checkpoint;
};

CreateRequest create_request_from_json(const nlohmann::json& j);

/// Live refinement sessions. Thread-safe; steps run on one engine thread
/// owned by the manager, never on the caller's thread.
class SessionManager {
 public:
  explicit SessionManager(SessionConfig cfg = {});
  ~SessionManager();

  SessionManager(const SessionManager&) = delete;
  SessionManager& operator=(const SessionManager&) = delete;

  std::string create(const CreateRequest& req);
  /// Same, from in-memory data (models are shared, not copied).
  std::string create(Sample sample, std::shared_ptr<const Models> models);

  nlohmann::json describe(const std::string& id) const;
  /// Validates every point first; on any failure the session is unchanged.
  nlohmann::json submit_hints(const std::string& id, const std::vector<HintPoint>& points);
  /// Queues one argmax refinement step. The future yields the step's JSON
  /// (report plus suggestions). Throws kConflict when a step is in flight.
  std::future<nlohmann::json> step(const std::string& id);
  Slice slice(const std::string& id, Plane plane, int index, SliceLayer layer) const;
  nlohmann::json suggestions(const std::string& id) const;
  nlohmann::json metrics(const std::string& id) const;
  void remove(const std::string& id);

  std::size_t size() const;

 private:
  struct Session;

  std::shared_ptr<Session> find(const std::string& id) const;
  std::shared_ptr<const Models> models_for(const std::filesystem::path& ckpt);
  void engine_loop();

  SessionConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::shared_ptr<const Models>> model_cache_;
  std::uint64_t next_id_ = 1;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::thread engine_;
};

}  // namespace mecca
