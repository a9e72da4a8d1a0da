"""Fisher Feedback Navigation - numerical domain modules"""
