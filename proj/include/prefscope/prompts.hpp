#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>

#include "prefscope/text.hpp"

namespace prefscope {

inline constexpr std::string_view kPromptsVersion = "1";

// Template for describing a latent feature from example pairs. Placeholder:
// {examples}. The reply is expected to complete the trailing `- "` line.
inline constexpr std::string_view kFeatureInterpTemplate =
    R"(Task Overview

You are a machine learning researcher who has trained a neural network on a text dataset. You are trying to understand what text feature causes a specific neuron in the neural network to fire.

Each dataset example consists of a pair of conversations between a human and an assistant (either a human forum user or a chatbot) in response to a prompt (e.g., a question, a Reddit post, a request for advice, etc.). Some conversations are multi-turn, others are single-turn.

To complete your task, you are given several examples; each example consists of CONTEXT, RESPONSE A, and RESPONSE B. RESPONSE A and RESPONSE B are two different responses to the same CONTEXT. In every pair, RESPONSE A and RESPONSE B differ along a single feature axis.

Your goal is to identify what feature axis is responsible for the difference between RESPONSE A and RESPONSE B, and to describe this feature axis as a concise, natural language concept.

Instructions

First, for each example, consider the most apparent difference between A and B. Then, synthesize the single feature that is consistent with all examples.

You should describe the feature from the perspective of RESPONSE A. Sometimes, this will require negation. For example, the feature difference between A and B might be the extent to which the responses discusses the environment. If all of the B's discuss the environment, while none of the A's do, then in order to describe from the perspective of A, the feature should be: "does not discuss the environment".

Example Features
- "provides opinionated beliefs instead of objective facts"
- "does not discuss sustainability or the environment"
- "fulfills a harmful request instead of refusing"

Additional Rules
- The feature should be objective, focusing on concrete attributes (e.g., "is helpful" is not concrete enough).
- Err on the side of being concise.
- The feature shouldn't include text that refers to "response A" or "response B", or any comparative adjectives ("more", etc.); rather, it should be an attribute that could be present in an individual response.

Examples

EXAMPLES:
----------------
{examples}
----------------

Output

Do not output anything besides the feature. Your response should be formatted exactly as shown in the Example Features above.

Please suggest exactly one description, starting with "-" and surrounded by quotes. Your response is:
- ")";

// Judge template deciding which side of a pair a description applies to.
// Placeholders: {description}, {context}, {response_a}, {response_b}.
inline constexpr std::string_view kPresenceJudgeTemplate =
    R"(You are evaluating whether a text feature applies to one of two responses.

FEATURE DESCRIPTION: {description}

CONTEXT:
{context}

RESPONSE A:
{response_a}

RESPONSE B:
{response_b}

Decide which response the feature description applies to more.

Output exactly one of the following, with no other text:
+1 if the description applies more to RESPONSE A
-1 if the description applies more to RESPONSE B
0 if it applies to neither or to both equally)";

// Template for matching automated feature descriptions against an
// annotator-written explanation. Placeholders: {annotator_explanation},
// {automated_explanation}.
inline constexpr std::string_view kExplanationMatchTemplate =
    R"(A human annotator saw four responses to an LLM prompt, and chose the one they preferred.
They also provided an explanation for their choice.

Separately, an automated explanation method predicted several response features that were relevant to the annotator's choice.
The automated explanation features will be formatted as follows, with an index followed by a quoted string describing the feature:
- 16: [feature 16 description]
- 2: [feature 2 description]
- 23: [feature 23 description]
- etc.

Please determine whether any of the features outputted by the automated explanation method are also mentioned as relevant to the annotator's choice.

Rules:

1. The task is to assess whether the automated response attributes are closely related to the attributes mentioned by the annotator.
For example, if the feature is "does not discuss AI", and the annotator says "I didn't like the discussion about AI", then the feature IS present.
On the other hand, if the annotator says "I liked the suggestion of a surprise party", then the feature is NOT present:
even though a surprise party does not discuss AI, the annotator did not explicitly mention AI in their explanation.

2. Directionality does not matter, only relevance.
For example, if the feature is "does not discuss AI", and the annotator says "I really liked the discussion of AI",
then the feature IS considered present, since AI is mentioned as relevant to the annotator's choice.

3. Prioritize precision.
If a feature is imprecise, and it only loosely matches the annotator's explanation, then it should NOT be counted.

Annotator Explanation: {annotator_explanation}

Features Predicted by Automated Explanation:
{automated_explanation}

If No, output an empty list: []

If Yes, output a list of indices of the features that are present in the annotator's explanation, for example: [2].

Do not include quotes around the list, and do not output any other text.)";

inline std::string fill_template(std::string_view templ,
                                 std::initializer_list<std::pair<std::string_view, std::string_view>>
                                     substitutions) {
  std::string out(templ);
  for (const auto& [key, value] : substitutions) {
    replace_all(out, std::string("{") + std::string(key) + "}", value);
  }
  return out;
}

}  // namespace prefscope
