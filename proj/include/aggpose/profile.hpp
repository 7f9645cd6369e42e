#pragma once

#include <chrono>
#include <map>
#include <string>

namespace aggpose {

/// Wall-clock accumulator keyed by block category. Installed per thread;
/// ScopedTimer is a no-op when no profile is installed.
class Profile {
 public:
  class Install {
   public:
    explicit Install(Profile& p) : previous_(current()) { current() = &p; }
    ~Install() { current() = previous_; }
    Install(const Install&) = delete;
    Install& operator=(const Install&) = delete;

   private:
    Profile* previous_;
  };

  static Profile*& current() {
    thread_local Profile* p = nullptr;
    return p;
  }

  void add(const std::string& category, double seconds) { seconds_[category] += seconds; }
  const std::map<std::string, double>& seconds() const { return seconds_; }
  void clear() { seconds_.clear(); }

 private:
  std::map<std::string, double> seconds_;
};

/// Charges the enclosing scope to `category`. Nested timers are exclusive:
/// an inner timer's time is not also charged to the outer one.
class ScopedTimer {
 public:
  explicit ScopedTimer(const char* category)
      : profile_(Profile::current()), category_(category), parent_(active()) {
    if (profile_ == nullptr) return;
    start_ = std::chrono::steady_clock::now();
    active() = this;
  }
  ~ScopedTimer() {
    if (profile_ == nullptr) return;
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    profile_->add(category_, total - children_);
    if (parent_ != nullptr) parent_->children_ += total;
    active() = parent_;
  }
  ScopedTimer(const ScopedTimer&) = delete;
  ScopedTimer& operator=(const ScopedTimer&) = delete;

 private:
  static ScopedTimer*& active() {
    thread_local ScopedTimer* t = nullptr;
    return t;
  }

  Profile* profile_;
  const char* category_;
  ScopedTimer* parent_;
  double children_ = 0.0;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace aggpose
