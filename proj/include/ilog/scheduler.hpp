#pragma once

#include "ilog/bytes.hpp"
#include "ilog/study.hpp"
#include "ilog/time.hpp"

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ilog {

enum class TaskKind { episode, mood_prompt };
std::string_view to_string(TaskKind k);
std::optional<TaskKind> task_kind_from_string(std::string_view s);

struct Question {
    CodebookId codebook = CodebookId::activity;
    std::string prompt;
    bool conditional = false;  // transport: asked only after a travelling answer

    friend bool operator==(const Question&, const Question&) = default;
};

struct DiaryTask {
    Id128 task_id;
    TaskKind kind = TaskKind::episode;
    TimestampMs episode_start = 0;
    TimestampMs emit_at = 0;
    std::vector<Question> questions;
    std::optional<TimestampMs> expiry;

    friend bool operator==(const DiaryTask&, const DiaryTask&) = default;
};

struct AnswerItem {
    CodebookId codebook = CodebookId::activity;
    int code = 0;
    std::optional<std::string> open_text;

    friend bool operator==(const AnswerItem&, const AnswerItem&) = default;
};

struct DiaryAnswer {
    Id128 task_id;
    std::vector<AnswerItem> answers;
    TimestampMs answered_at_start = 0;
    TimestampMs answered_at_end = 0;
    bool same_as_previous = false;

    friend bool operator==(const DiaryAnswer&, const DiaryAnswer&) = default;
};

struct AnswerTelemetry {
    Id128 task_id;
    TimestampMs notified_at = 0;
    std::int64_t reaction_ms = 0;
    std::int64_t completion_ms = 0;
    bool delivered_offline = false;

    friend bool operator==(const AnswerTelemetry&, const AnswerTelemetry&) = default;
};

enum class TaskOutcome { answered, backlog_evicted, window_expired, study_ended };
std::string_view to_string(TaskOutcome o);
std::optional<TaskOutcome> task_outcome_from_string(std::string_view s);

/// Questions of an episode or mood task under `config`.
std::vector<Question> task_questions(TaskKind kind, const StudyConfig& config);

/// Every diary task of the study for one participant, ordered by
/// (emit_at, kind, episode_start). Local days are UTC shifted by
/// `tz_offset_min`; `salt` (normally the pseudonym) keys the task ids.
std::vector<DiaryTask> generate_timeline(const StudyConfig& config, int tz_offset_min = 0,
                                         const Id128& salt = {});

/// One participant's backlog. Single-writer.
class TaskQueue {
public:
    struct Delivery {
        TimestampMs first_delivered_at = 0;
        bool offline = false;
    };
    struct Expired {
        Id128 task_id;
        TaskOutcome reason;
    };
    struct Accepted {
        DiaryAnswer answer;  // answers filled in when same_as_previous was used
        AnswerTelemetry telemetry;
    };

    /// `reply_window_ms` set means delivered tasks left unanswered past the
    /// window are expired with reason window_expired on the next delivery.
    explicit TaskQueue(int cap, std::optional<std::int64_t> reply_window_ms = std::nullopt);
    static TaskQueue for_study(const StudyConfig& config);

    /// Appends a due task; past the cap the oldest pending task is evicted.
    /// Throws DuplicateTask for an id the queue has already seen.
    void enqueue(DiaryTask task);

    /// Validates and records an answer. Throws UnknownTask, InvalidAnswer or
    /// WindowExpired (the task is then expired with reason window_expired).
    Accepted accept_answer(const Id128& task_id, const DiaryAnswer& answer, TimestampMs notified_at,
                           const StudyConfig& config);

    /// Pending tasks with emit_at <= now. A task first delivered here counts
    /// as delivered offline when it was emitted at or after `offline_since`.
    std::vector<DiaryTask> deliver_pending(TimestampMs now,
                                           std::optional<TimestampMs> offline_since = std::nullopt);

    /// Moves everything still pending to study_ended.
    void end_study();

    int cap() const { return cap_; }
    const std::deque<DiaryTask>& pending() const { return pending_; }
    const std::vector<Expired>& expired() const { return expired_; }
    std::optional<TaskOutcome> outcome(const Id128& id) const;
    bool is_pending(const Id128& id) const;
    std::optional<Delivery> delivery(const Id128& id) const;
    std::size_t answered_count() const { return answered_; }
    std::map<TaskOutcome, std::size_t> outcome_counts() const;

    // Rebuilding from persisted state.
    void restore_pending(DiaryTask task, std::optional<Delivery> delivery);
    void restore_outcome(const Id128& id, TaskOutcome outcome);
    void restore_previous_episode(std::vector<AnswerItem> answers) {
        previous_episode_ = std::move(answers);
    }
    const std::optional<std::vector<AnswerItem>>& previous_episode() const {
        return previous_episode_;
    }

private:
    std::deque<DiaryTask>::iterator expire(std::deque<DiaryTask>::iterator it, TaskOutcome reason);

    int cap_;
    std::optional<std::int64_t> reply_window_ms_;
    std::deque<DiaryTask> pending_;
    std::vector<Expired> expired_;
    std::map<Id128, TaskOutcome> outcomes_;
    std::map<Id128, Delivery> deliveries_;
    std::optional<std::vector<AnswerItem>> previous_episode_;
    std::size_t answered_ = 0;
};

/// Codebook checks for an answer to `task` (no window or telemetry logic).
/// Throws InvalidAnswer.
void validate_answer_items(const DiaryTask& task, const std::vector<AnswerItem>& items,
                           const StudyConfig& config);

}  // namespace ilog
